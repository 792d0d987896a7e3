use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::TensorError;
use crate::supernet::DetectionNet;
use crate::task_harness::data::{generate_scene, DatasetParams};
use crate::task_harness::train::{DetectionBatch, DetectionObjective};
use crate::supernet::STEM_STRIDE;
use crate::tensor::{Faults, ParamKind, ParamStore, Tape};

/// Denominator floor of the relative error, so near-zero gradients are
/// judged on an absolute scale.
pub const REL_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub probes: usize,
    /// Share of probes drawn from architecture logits.
    pub alpha_share: f64,
    pub eps: f32,
    pub seed: u64,
    pub image_size: usize,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            probes: 60,
            alpha_share: 0.5,
            eps: 1e-3,
            seed: 0,
            image_size: 32,
            tolerance: 2e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradProbe {
    pub name: String,
    pub index: usize,
    pub architecture: bool,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
    pub worst_rel_err: f64,
    pub worst: Option<GradProbe>,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central finite differences on random weight and logit entries through
/// the full network and detection loss. Logits are redrawn around zero so
/// that no candidate weight is degenerate; `store` is not modified.
pub fn grad_check_supernet(
    net: &DetectionNet,
    store: &ParamStore,
    cfg: &GradCheckConfig,
    faults: Faults,
) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = store.clone();
    let normal = Normal::new(0.0f32, 0.5).expect("valid normal");
    let alpha_names: Vec<String> = store.names_of(ParamKind::Architecture).map(str::to_string).collect();
    for n in &alpha_names {
        for v in store.get_mut(n)?.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    let weight_names: Vec<String> = store.names_of(ParamKind::Weight).map(str::to_string).collect();

    let params = DatasetParams {
        seed: cfg.seed,
        n: 1,
        image_size: cfg.image_size,
        scale_min: 6.0,
        scale_max: (cfg.image_size as f32 * 0.75).max(8.0),
        num_classes: net.config.num_classes,
        channels: net.config.in_channels,
        ..DatasetParams::default()
    };
    let batch = DetectionBatch::from_scenes(&[generate_scene(&params, 0)], STEM_STRIDE)?;
    let objective = DetectionObjective { net };

    let mut tape = Tape::with_faults(faults);
    let (loss, _) = objective.loss_with_breakdown(&mut tape, &store, &batch)?;
    tape.backward(loss, &mut store)?;

    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        Ok(objective.loss_with_breakdown(&mut t, s, &batch)?.1.total())
    };

    let mut probes = Vec::with_capacity(cfg.probes);
    for _ in 0..cfg.probes {
        let architecture = !alpha_names.is_empty() && rng.random_bool(cfg.alpha_share.clamp(0.0, 1.0));
        let pool = if architecture { &alpha_names } else { &weight_names };
        if pool.is_empty() {
            return Err(TensorError::Empty("gradient probe pool"));
        }
        let name = pool[rng.random_range(0..pool.len())].clone();
        let index = rng.random_range(0..store.get(&name)?.data().len());
        let analytic = store.get(&name)?.grad().map_or(0.0, |g| g[index] as f64);
        let orig = store.get(&name)?.data()[index];
        store.get_mut(&name)?.data_mut()[index] = orig + cfg.eps;
        let up = eval(&store)?;
        store.get_mut(&name)?.data_mut()[index] = orig - cfg.eps;
        let down = eval(&store)?;
        store.get_mut(&name)?.data_mut()[index] = orig;
        // The perturbation actually applied after f32 rounding.
        let h = ((orig + cfg.eps) as f64) - ((orig - cfg.eps) as f64);
        let numeric = (up - down) / h;
        probes.push(GradProbe {
            rel_err: rel_err(analytic, numeric),
            name,
            index,
            architecture,
            analytic,
            numeric,
        });
    }
    let worst = probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).cloned();
    let worst_rel_err = worst.as_ref().map_or(0.0, |p| p.rel_err);
    Ok(GradCheckReport {
        passed: worst_rel_err < cfg.tolerance,
        probes,
        worst_rel_err,
        worst,
        tolerance: cfg.tolerance,
    })
}
