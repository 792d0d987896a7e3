//! Classification mode for the decoupling ablation: a standard-stream
//! supernet over `t1..t5`, skip and none in normal cells, pooling in the
//! reduction cell, on synthetic texture images.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, TensorError};
use crate::nn::{Conv1x1, StemConv};
use crate::search_engine::{derive_cell, run_search, AlphaShape, Objective, ScheduleConfig, StepRecord};
use crate::search_space::{SharedStream, Stream, Variant};
use crate::supernet::{AlphaTable, CellTopology};
use crate::tensor::kernels::PoolKind;
use crate::tensor::{ParamKind, ParamStore, Shape, Tape, Tensor, Var};

/// Convolutional candidates of normal cells, in table order.
pub const NORMAL_VARIANTS: [Variant; 5] = [Variant::T1, Variant::T2, Variant::T3, Variant::T4, Variant::T5];
pub const NORMAL_CANDIDATES: usize = 7;
pub const REDUCE_CANDIDATES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormalOp {
    Conv(Variant),
    Skip,
    None,
}

impl NormalOp {
    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0..5 => Some(NormalOp::Conv(NORMAL_VARIANTS[i])),
            5 => Some(NormalOp::Skip),
            6 => Some(NormalOp::None),
            _ => None,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            NormalOp::Conv(v) => v.index(),
            NormalOp::Skip => 5,
            NormalOp::None => 6,
        }
    }

    /// `t1` and `t2` tap representations that deeper layers also consume.
    pub fn is_shared(&self) -> bool {
        matches!(self, NormalOp::Conv(Variant::T1 | Variant::T2))
    }
}

impl fmt::Display for NormalOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormalOp::Conv(v) => write!(f, "{}", v.tag()),
            NormalOp::Skip => f.write_str("skip"),
            NormalOp::None => f.write_str("none"),
        }
    }
}

impl FromStr for NormalOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        (0..NORMAL_CANDIDATES)
            .filter_map(NormalOp::from_index)
            .find(|op| op.to_string() == s)
            .ok_or_else(|| format!("unknown normal-cell operation `{s}`"))
    }
}

impl Serialize for NormalOp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NormalOp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Derived normal cell: per intermediate node, `(predecessor, op)` pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalGenotype {
    pub nodes: Vec<Vec<(usize, NormalOp)>>,
}

impl NormalGenotype {
    pub fn selections(&self) -> impl Iterator<Item = NormalOp> + '_ {
        self.nodes.iter().flatten().map(|(_, op)| *op)
    }

    pub fn derive(alphas: &AlphaTable) -> Self {
        let topo = CellTopology {
            nodes: crate::search_engine::derive::nodes_for_edges(alphas.edges),
        };
        let rows: Vec<&[f32]> = (0..alphas.edges).map(|e| alphas.row(0, e)).collect();
        let choice = derive_cell(topo, &rows, &[NormalOp::None.index()]);
        NormalGenotype {
            nodes: choice
                .into_iter()
                .map(|node| {
                    node.into_iter()
                        .map(|(p, c)| (p, NormalOp::from_index(c).expect("candidate in range")))
                        .collect()
                })
                .collect(),
        }
    }
}

/// Fraction of convolutional selections that are `t1` or `t2`, pooled over
/// all genotypes. Skip selections are not counted in the denominator.
pub fn shared_trans_fraction(genotypes: &[NormalGenotype]) -> Result<f64, TensorError> {
    if genotypes.is_empty() {
        return Err(TensorError::Empty("shared_trans_fraction"));
    }
    let (mut shared, mut total) = (0usize, 0usize);
    for op in genotypes.iter().flat_map(NormalGenotype::selections) {
        if let NormalOp::Conv(_) = op {
            total += 1;
            shared += op.is_shared() as usize;
        }
    }
    Ok(if total == 0 { 0.0 } else { shared as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassificationParams {
    pub seed: u64,
    pub n: usize,
    pub image_size: usize,
    pub num_classes: usize,
}

impl Default for ClassificationParams {
    fn default() -> Self {
        ClassificationParams {
            seed: 0,
            n: 512,
            image_size: 16,
            num_classes: 10,
        }
    }
}

pub const TEXTURE_CLASSES: usize = 10;

/// Periodic texture of class `k` at `(x, y)` with phase `(px, py)`.
fn texture(k: usize, x: usize, y: usize, px: usize, py: usize) -> bool {
    let (x, y) = (x + px, y + py);
    match k {
        0 => y % 4 < 2,
        1 => x % 4 < 2,
        2 => (x + y) % 4 < 2,
        3 => (x + 4 - y % 4) % 4 < 2,
        4 => y % 8 < 4,
        5 => x % 8 < 4,
        6 => (x + y) % 2 == 0,
        7 => (x / 2 + y / 2) % 2 == 0,
        8 => x % 4 == 0 && y % 4 == 0,
        _ => (x / 4 + y / 4) % 2 == 0,
    }
}

/// Image `index` of the dataset and its label.
pub fn generate_texture(p: &ClassificationParams, index: u64) -> (Tensor, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(index);
    let label = rng.random_range(0..p.num_classes);
    let (px, py) = (rng.random_range(0..8), rng.random_range(0..8));
    let lo = rng.random_range(0.0f32..0.3);
    let hi = rng.random_range(0.6f32..1.0);
    let s = p.image_size;
    let img = Tensor::from_fn(Shape::new(1, 1, s, s), |i| {
        let on = texture(label, i % s, i / s, px, py);
        (if on { hi } else { lo }) + rng.random_range(-0.1f32..0.1)
    });
    (img, label)
}

pub fn generate_classification_dataset(p: &ClassificationParams) -> Result<Vec<(Tensor, usize)>, DataError> {
    if p.n == 0 || p.image_size < 4 {
        return Err(DataError::InvalidParams("need n >= 1 and image_size >= 4".into()));
    }
    if p.num_classes == 0 || p.num_classes > TEXTURE_CLASSES {
        return Err(DataError::InvalidParams(format!(
            "num_classes must lie in 1..={TEXTURE_CLASSES}, got {}",
            p.num_classes
        )));
    }
    Ok((0..p.n as u64).map(|i| generate_texture(p, i)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

pub fn class_batches(samples: &[(Tensor, usize)], batch_size: usize) -> Result<Vec<ClassBatch>, TensorError> {
    if batch_size == 0 {
        return Err(TensorError::InvalidArgument("batch_size must be positive".into()));
    }
    samples
        .chunks(batch_size)
        .map(|c| {
            let s = c[0].0.shape();
            let data: Vec<f32> = c.iter().flat_map(|(t, _)| t.data().iter().copied()).collect();
            Ok(ClassBatch {
                images: Tensor::new(Shape::new(c.len(), s.c(), s.h(), s.w()), data)?,
                labels: c.iter().map(|(_, l)| *l).collect(),
            })
        })
        .collect()
}

/// Mean softmax cross-entropy of `N x K x 1 x 1` logits.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    let sh = tape.shape(logits);
    if sh.n() != labels.len() || sh.plane() != 1 {
        return Err(TensorError::InvalidArgument(format!(
            "cross entropy over {sh} logits with {} labels",
            labels.len()
        )));
    }
    let k = sh.c();
    let x = tape.value(logits).data();
    let n = labels.len() as f64;
    let mut grad = vec![0.0f32; x.len()];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(TensorError::InvalidArgument(format!("label {y} out of range for {k} classes")));
        }
        let row: Vec<f64> = x[i * k..(i + 1) * k].iter().map(|v| *v as f64).collect();
        let p = crate::tensor::softmax(&row)?;
        loss -= p[y].max(1e-300).ln();
        for c in 0..k {
            let t = if c == y { 1.0 } else { 0.0 };
            grad[i * k + c] = ((p[c] - t) / n) as f32;
        }
    }
    tape.fused_scalar("cross_entropy", loss / n, vec![logits], vec![grad])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassNetConfig {
    pub c: usize,
    pub nodes: usize,
    pub decouple: bool,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for ClassNetConfig {
    fn default() -> Self {
        ClassNetConfig {
            c: 16,
            nodes: 3,
            decouple: true,
            in_channels: 1,
            num_classes: 10,
        }
    }
}

/// Logit names of the two cell types. Normal cells use the table slot of
/// group 0 so the generic search loop can read them.
pub fn normal_alpha_name(edge: usize) -> String {
    AlphaTable::param_name(0, edge)
}

pub fn reduce_alpha_name(edge: usize) -> String {
    format!("alpha.reduce.e{edge}")
}

#[derive(Clone, Debug, PartialEq)]
struct NormalEdge {
    stream: SharedStream,
    alpha: String,
}

impl NormalEdge {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let outs = self.stream.forward(tape, store, x)?;
        let mut parts: Vec<Var> = outs.outputs.into_iter().map(|(_, v)| v).collect();
        parts.push(x);
        parts.push(tape.constant(Tensor::zeros(tape.shape(x))));
        let a = tape.param(store, &self.alpha)?;
        let w = tape.softmax(a)?;
        tape.mix(&parts, w)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ReduceEdge {
    stride: usize,
    alpha: String,
}

impl ReduceEdge {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let max = tape.pool3x3(x, self.stride, PoolKind::Max)?;
        let avg = tape.pool3x3(x, self.stride, PoolKind::Avg)?;
        let skip = if self.stride == 1 { x } else { tape.subsample(x, self.stride)? };
        let none = tape.constant(Tensor::zeros(tape.shape(max)));
        let a = tape.param(store, &self.alpha)?;
        let w = tape.softmax(a)?;
        tape.mix(&[max, avg, skip, none], w)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
enum ClassEdge {
    Normal(NormalEdge),
    Reduce(ReduceEdge),
}

#[derive(Clone, Debug, PartialEq)]
struct ClassCell {
    topology: CellTopology,
    edges: Vec<ClassEdge>,
    out: Conv1x1,
}

impl ClassCell {
    fn new(prefix: &str, c: usize, nodes: usize, reduce: bool, decouple: bool) -> Result<Self, TensorError> {
        let topology = CellTopology { nodes };
        let edges = topology
            .edges()
            .into_iter()
            .enumerate()
            .map(|(e, (pred, _))| {
                Ok(if reduce {
                    ClassEdge::Reduce(ReduceEdge {
                        stride: if pred == 0 { 2 } else { 1 },
                        alpha: reduce_alpha_name(e),
                    })
                } else {
                    ClassEdge::Normal(NormalEdge {
                        stream: SharedStream::new(&format!("{prefix}.e{e}"), Stream::Standard, c, decouple, &NORMAL_VARIANTS)?,
                        alpha: normal_alpha_name(e),
                    })
                })
            })
            .collect::<Result<_, TensorError>>()?;
        Ok(ClassCell {
            topology,
            edges,
            out: Conv1x1::new(format!("{prefix}.out"), nodes * c, c, true),
        })
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        for e in &self.edges {
            if let ClassEdge::Normal(n) = e {
                n.stream.init(store, rng)?;
            }
        }
        self.out.init(store, rng)
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let mut nodes = vec![x];
        for j in 1..=self.topology.nodes {
            let mut acc: Option<Var> = None;
            for (i, &node) in nodes.iter().enumerate() {
                let y = match &self.edges[self.topology.edge_index(i, j)] {
                    ClassEdge::Normal(e) => e.forward(tape, store, node)?,
                    ClassEdge::Reduce(e) => e.forward(tape, store, node)?,
                };
                acc = Some(match acc {
                    Some(a) => tape.add(a, y)?,
                    None => y,
                });
            }
            nodes.push(acc.expect("node has at least one predecessor"));
        }
        let cat = tape.concat(&nodes[1..])?;
        self.out.forward(tape, store, cat)
    }
}

/// stem, normal cell, reduction cell, normal cell, global pooling and a
/// linear classifier. Normal cells share logits but not weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationNet {
    pub config: ClassNetConfig,
    stem: StemConv,
    cells: Vec<ClassCell>,
    head: Conv1x1,
}

impl ClassificationNet {
    pub fn new(config: ClassNetConfig) -> Result<Self, TensorError> {
        if config.nodes == 0 || config.num_classes == 0 || config.in_channels == 0 {
            return Err(TensorError::InvalidArgument("nodes, num_classes and in_channels must be positive".into()));
        }
        let c = config.c;
        let cells = vec![
            ClassCell::new("n0", c, config.nodes, false, config.decouple)?,
            ClassCell::new("r0", c, config.nodes, true, config.decouple)?,
            ClassCell::new("n1", c, config.nodes, false, config.decouple)?,
        ];
        Ok(ClassificationNet {
            stem: StemConv {
                prefix: "stem".into(),
                cin: config.in_channels,
                cout: c,
                stride: 1,
            },
            cells,
            head: Conv1x1::new("head", c, config.num_classes, true),
            config,
        })
    }

    pub fn num_edges(&self) -> usize {
        CellTopology { nodes: self.config.nodes }.num_edges()
    }

    pub fn alpha_shape(&self) -> AlphaShape {
        AlphaShape {
            groups: 1,
            edges: self.num_edges(),
            candidates: NORMAL_CANDIDATES,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        self.stem.init(store, rng)?;
        for c in &self.cells {
            c.init(store, rng)?;
        }
        self.head.init(store, rng)?;
        for e in 0..self.num_edges() {
            let zeros = |n| Tensor::zeros(Shape::vector(n));
            store.insert(normal_alpha_name(e), zeros(NORMAL_CANDIDATES), ParamKind::Architecture)?;
            store.insert(reduce_alpha_name(e), zeros(REDUCE_CANDIDATES), ParamKind::Architecture)?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var, TensorError> {
        let mut h = self.stem.forward(tape, store, image)?;
        for c in &self.cells {
            h = c.forward(tape, store, h)?;
        }
        let g = tape.global_avg_pool(h);
        self.head.forward(tape, store, g)
    }
}

pub struct ClassObjective<'a> {
    pub net: &'a ClassificationNet,
}

impl Objective for ClassObjective<'_> {
    type Batch = ClassBatch;

    fn loss(&self, tape: &mut Tape, store: &ParamStore, batch: &ClassBatch) -> Result<Var, TensorError> {
        let x = tape.constant(batch.images.clone());
        let logits = self.net.forward(tape, store, x)?;
        cross_entropy(tape, logits, &batch.labels)
    }
}

/// Top-1 accuracy of the relaxed network.
pub fn accuracy(net: &ClassificationNet, store: &ParamStore, batches: &[ClassBatch]) -> Result<f64, TensorError> {
    let (mut right, mut total) = (0usize, 0usize);
    for b in batches {
        let mut tape = Tape::new();
        let x = tape.constant(b.images.clone());
        let logits = net.forward(&mut tape, store, x)?;
        let v = tape.value(logits).data();
        let k = net.config.num_classes;
        for (i, &y) in b.labels.iter().enumerate() {
            let row = &v[i * k..(i + 1) * k];
            let pred = (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            right += (pred == y) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassificationStudyConfig {
    pub data: ClassificationParams,
    pub net: ClassNetConfig,
    pub schedule: ScheduleConfig,
    pub runs_per_setting: usize,
    pub seed: u64,
    pub eval_size: usize,
}

impl Default for ClassificationStudyConfig {
    fn default() -> Self {
        ClassificationStudyConfig {
            data: ClassificationParams::default(),
            net: ClassNetConfig {
                c: 8,
                ..ClassNetConfig::default()
            },
            schedule: ScheduleConfig {
                total_iters: 600,
                batch_size: 8,
                lr: 0.05,
                lr_decay_step: 0,
                derive_every: 200,
                alpha_lr: 3e-3,
                early_stop: false,
                ..ScheduleConfig::default()
            },
            runs_per_setting: 4,
            seed: 0,
            eval_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRun {
    pub decouple: bool,
    pub seed: u64,
    pub genotype: NormalGenotype,
    pub shared_trans_fraction: f64,
    pub accuracy: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationStudy {
    pub runs: Vec<ClassificationRun>,
    pub mean_fraction_decoupled: f64,
    pub mean_fraction_coupled: f64,
}

/// One search on the classification supernet. Returns the run summary.
pub fn classification_search(
    cfg: &ClassificationStudyConfig,
    decouple: bool,
    seed: u64,
    on_step: impl FnMut(&StepRecord),
) -> Result<ClassificationRun, Error> {
    classification_search_with_store(cfg, decouple, seed, on_step).map(|(run, _)| run)
}

/// [`classification_search`] that also hands back the searched parameters.
pub fn classification_search_with_store(
    cfg: &ClassificationStudyConfig,
    decouple: bool,
    seed: u64,
    on_step: impl FnMut(&StepRecord),
) -> Result<(ClassificationRun, ParamStore), Error> {
    let samples = generate_classification_dataset(&cfg.data)?;
    let n_val = ((samples.len() as f64) * cfg.schedule.val_fraction).round() as usize;
    if n_val == 0 || n_val >= samples.len() {
        return Err(Error::Config("val_fraction leaves an empty split".into()));
    }
    let (train, val) = samples.split_at(samples.len() - n_val);
    let bs = cfg.schedule.batch_size;
    let (train, val) = (class_batches(train, bs)?, class_batches(val, bs)?);
    let eval_params = ClassificationParams {
        seed: cfg.data.seed ^ 0x005e_ed0f_e7a1,
        n: cfg.eval_size.max(1),
        ..cfg.data.clone()
    };
    let eval = class_batches(&generate_classification_dataset(&eval_params)?, bs)?;

    let net = ClassificationNet::new(ClassNetConfig {
        decouple,
        num_classes: cfg.data.num_classes,
        ..cfg.net.clone()
    })?;
    let mut store = ParamStore::new();
    net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let objective = ClassObjective { net: &net };
    let outcome = run_search(
        &mut store,
        &objective,
        &train,
        &val,
        cfg.schedule.clone(),
        net.alpha_shape(),
        NormalGenotype::derive,
        on_step,
    )?;
    let fraction = shared_trans_fraction(std::slice::from_ref(&outcome.genotype))?;
    let run = ClassificationRun {
        decouple,
        seed,
        shared_trans_fraction: fraction,
        accuracy: accuracy(&net, &store, &eval)?,
        iterations: outcome.iterations,
        genotype: outcome.genotype,
    };
    Ok((run, store))
}

/// `runs_per_setting` searches with and without decoupling, paired by seed.
pub fn classification_mode_search(
    cfg: &ClassificationStudyConfig,
    mut on_run: impl FnMut(&ClassificationRun),
) -> Result<ClassificationStudy, Error> {
    if cfg.runs_per_setting == 0 {
        return Err(Error::Config("runs_per_setting must be positive".into()));
    }
    let mut runs = Vec::with_capacity(2 * cfg.runs_per_setting);
    for r in 0..cfg.runs_per_setting as u64 {
        for decouple in [true, false] {
            let run = classification_search(cfg, decouple, cfg.seed + r, |_| {})?;
            on_run(&run);
            runs.push(run);
        }
    }
    let mean = |d: bool| {
        let f: Vec<f64> = runs.iter().filter(|r| r.decouple == d).map(|r| r.shared_trans_fraction).collect();
        f.iter().sum::<f64>() / f.len() as f64
    };
    Ok(ClassificationStudy {
        mean_fraction_decoupled: mean(true),
        mean_fraction_coupled: mean(false),
        runs,
    })
}
