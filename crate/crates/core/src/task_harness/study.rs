//! Searched genotypes against random ones on the synthetic detection task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{generate_detection_dataset, DatasetParams};
use super::train::{evaluate, make_batches, random_genotype, train_derived, DetectionObjective, TrainConfig};
use crate::error::Error;
use crate::search_engine::{
    build_derived_network, run_detection_search, Genotype, ScheduleConfig, SearchOutcome, StepRecord,
};
use crate::supernet::{CellTopology, DetectionNet, SupernetConfig};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionStudyConfig {
    pub data: DatasetParams,
    pub eval_size: usize,
    pub supernet: SupernetConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub search_seeds: Vec<u64>,
    pub random_genotypes: usize,
    /// Seed of the random-genotype sampler.
    pub random_seed: u64,
    /// Initialisation seeds shared by every retrained network; a genotype
    /// scores the mean AP over them.
    pub train_seeds: Vec<u64>,
}

impl Default for DetectionStudyConfig {
    fn default() -> Self {
        DetectionStudyConfig {
            data: DatasetParams::default(),
            eval_size: 256,
            supernet: SupernetConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig {
                iters: 1200,
                ..TrainConfig::default()
            },
            search_seeds: vec![0, 1, 2],
            random_genotypes: 10,
            random_seed: 1000,
            train_seeds: vec![0, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredGenotype {
    pub genotype: String,
    /// Mean over the retraining seeds.
    pub ap50: f64,
    pub ap50_per_seed: Vec<f64>,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchedResult {
    pub seed: u64,
    pub scored: ScoredGenotype,
    pub iterations: usize,
    pub beats_median: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionStudy {
    pub random: Vec<ScoredGenotype>,
    pub median_random_ap: f64,
    pub searched: Vec<SearchedResult>,
    pub majority: bool,
}

/// Held-out scenes drawn from the same distribution as `data`.
pub fn eval_params(data: &DatasetParams, n: usize) -> DatasetParams {
    DatasetParams {
        seed: data.seed.wrapping_add(0x9e37_79b9),
        n,
        ..data.clone()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Retrains `g` from each shared initialisation seed and scores it on the
/// held-out scenes.
pub fn score_genotype(
    g: &Genotype,
    cfg: &DetectionStudyConfig,
    train: &[super::train::DetectionBatch],
    eval: &[super::data::SyntheticScene],
) -> Result<ScoredGenotype, Error> {
    if cfg.train_seeds.is_empty() {
        return Err(Error::Config("train_seeds must not be empty".into()));
    }
    let net = build_derived_network(g, &cfg.supernet)?;
    let mut aps = Vec::with_capacity(cfg.train_seeds.len());
    let mut losses = 0.0;
    for &seed in &cfg.train_seeds {
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let recs = train_derived(&net, &mut store, train, &cfg.train, |_| {})?;
        let (m, _) = evaluate(&net, &store, eval, cfg.train.batch_size)?;
        aps.push(m.ap50);
        losses += recs.last().map_or(f64::NAN, |r| r.loss);
    }
    let k = aps.len() as f64;
    Ok(ScoredGenotype {
        genotype: g.to_string(),
        ap50: aps.iter().sum::<f64>() / k,
        ap50_per_seed: aps,
        final_train_loss: losses / k,
    })
}

/// Supernet search on `data`: the last `val_fraction` of the scenes drive
/// the logits, the rest the weights.
pub fn detection_search(
    data: &DatasetParams,
    supernet: &SupernetConfig,
    schedule: &ScheduleConfig,
    seed: u64,
    on_step: impl FnMut(&StepRecord),
) -> Result<(SearchOutcome, ParamStore), Error> {
    let scenes = generate_detection_dataset(data)?;
    let n_val = ((scenes.len() as f64) * schedule.val_fraction).round() as usize;
    if n_val == 0 || n_val >= scenes.len() {
        return Err(Error::Config("val_fraction leaves an empty split".into()));
    }
    let (tr, va) = scenes.split_at(scenes.len() - n_val);
    let bs = schedule.batch_size;
    let (tr, va) = (make_batches(tr, bs)?, make_batches(va, bs)?);
    let net = DetectionNet::supernet(supernet.clone())?;
    let mut store = ParamStore::new();
    net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let topo = CellTopology { nodes: supernet.nodes };
    let out = run_detection_search(
        &mut store,
        &DetectionObjective { net: &net },
        &tr,
        &va,
        topo,
        schedule.clone(),
        on_step,
    )?;
    Ok((out, store))
}

pub enum StudyEvent<'a> {
    Random(usize, &'a ScoredGenotype),
    Searched(&'a SearchedResult),
}

pub fn detection_study(cfg: &DetectionStudyConfig, mut on_event: impl FnMut(StudyEvent)) -> Result<DetectionStudy, Error> {
    let scenes = generate_detection_dataset(&cfg.data)?;
    let eval = generate_detection_dataset(&eval_params(&cfg.data, cfg.eval_size))?;
    let train = make_batches(&scenes, cfg.train.batch_size)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.random_seed);
    let mut random = Vec::with_capacity(cfg.random_genotypes);
    for i in 0..cfg.random_genotypes {
        let g = random_genotype(&mut rng, cfg.supernet.nodes);
        let s = score_genotype(&g, cfg, &train, &eval)?;
        on_event(StudyEvent::Random(i, &s));
        random.push(s);
    }
    let median_random_ap = median(&random.iter().map(|s| s.ap50).collect::<Vec<_>>());

    let mut searched = Vec::with_capacity(cfg.search_seeds.len());
    for &seed in &cfg.search_seeds {
        let (out, _) = detection_search(&cfg.data, &cfg.supernet, &cfg.schedule, seed, |_| {})?;
        let scored = score_genotype(&out.genotype, cfg, &train, &eval)?;
        let iterations = out.iterations;
        let r = SearchedResult {
            seed,
            beats_median: scored.ap50 >= median_random_ap,
            scored,
            iterations,
        };
        on_event(StudyEvent::Searched(&r));
        searched.push(r);
    }
    let wins = searched.iter().filter(|r| r.beats_median).count();
    Ok(DetectionStudy {
        majority: 2 * wins > searched.len(),
        random,
        median_random_ap,
        searched,
    })
}
