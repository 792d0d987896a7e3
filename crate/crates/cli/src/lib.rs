//! Run configuration shared by every `fad` subcommand.

use std::fmt;
use std::path::{Path, PathBuf};

use fad_core::search_engine::ScheduleConfig;
use fad_core::supernet::SupernetConfig;
use fad_core::task_harness::classify::{ClassNetConfig, ClassificationParams, ClassificationStudyConfig};
use fad_core::task_harness::{DatasetParams, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Detect,
    Classify,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Detect => "detect",
            Task::Classify => "classify",
        })
    }
}

/// Classification-mode dataset and evaluation size. Width, node count and
/// decoupling come from the `supernet` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifySection {
    pub data: ClassificationParams,
    pub eval_size: usize,
}

impl Default for ClassifySection {
    fn default() -> Self {
        let d = ClassificationStudyConfig::default();
        ClassifySection {
            data: d.data,
            eval_size: d.eval_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    /// Seeds weight initialisation and genotype sampling. Datasets carry
    /// their own seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub supernet: SupernetConfig,
    pub schedule: ScheduleConfig,
    pub data: DatasetParams,
    /// Held-out scenes scored after retraining.
    pub eval_size: usize,
    pub train: TrainConfig,
    pub classify: ClassifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Detect,
            seed: 0,
            output_dir: PathBuf::from("fad-out"),
            supernet: SupernetConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DatasetParams::default(),
            eval_size: 64,
            train: TrainConfig::default(),
            classify: ClassifySection::default(),
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Read(PathBuf, std::io::Error),
    Parse(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read(p, e) => write!(f, "cannot read config {}: {e}", p.display()),
            ConfigError::Parse(m) => write!(f, "invalid config: {m}"),
            ConfigError::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    /// Parses a JSON document; unknown keys at any level are rejected.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.schedule.validate().or_else(|e| bad(format!("schedule: {e}")))?;
        if !self.schedule.total_iters.is_multiple_of(self.schedule.derive_every) {
            return bad(format!(
                "schedule.derive_every ({}) must divide schedule.total_iters ({})",
                self.schedule.derive_every, self.schedule.total_iters
            ));
        }
        if !(self.schedule.val_fraction > 0.0 && self.schedule.val_fraction < 1.0) {
            return bad("schedule.val_fraction must lie in (0, 1)".into());
        }
        let s = &self.supernet;
        if s.m == 0 || s.c == 0 || s.c_prime == 0 || s.nodes == 0 || s.num_classes == 0 || s.in_channels == 0 {
            return bad("supernet sizes must be positive".into());
        }
        if self.data.n == 0 || self.eval_size == 0 {
            return bad("data.n and eval_size must be positive".into());
        }
        if self.data.num_classes != s.num_classes || self.data.channels != s.in_channels {
            return bad(format!(
                "data ({} classes, {} channels) disagrees with supernet ({} classes, {} channels)",
                self.data.num_classes, self.data.channels, s.num_classes, s.in_channels
            ));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if self.classify.data.n == 0 || self.classify.eval_size == 0 {
            return bad("classify.data.n and classify.eval_size must be positive".into());
        }
        Ok(())
    }

    /// The classification search this config describes.
    pub fn classification(&self) -> ClassificationStudyConfig {
        ClassificationStudyConfig {
            data: self.classify.data.clone(),
            net: ClassNetConfig {
                c: self.supernet.c,
                nodes: self.supernet.nodes,
                decouple: self.supernet.decouple,
                in_channels: 1,
                num_classes: self.classify.data.num_classes,
            },
            schedule: self.schedule.clone(),
            runs_per_setting: 1,
            seed: self.seed,
            eval_size: self.classify.eval_size,
        }
    }
}
