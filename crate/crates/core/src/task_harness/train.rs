//! Batching, the detection objective and the retraining loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::SyntheticScene;
use super::loss::{detection_loss, LossBreakdown};
use super::metrics::{average_precision, decode, Metrics};
use super::targets::{assign_fcos_targets, DetectionTarget};
use crate::error::{Error, TensorError};
use crate::search_engine::{Genotype, GroupGene, Input, NodeGene, Objective};
use crate::search_space::TransformationId;
use crate::supernet::{DetectionNet, NUM_GROUPS, STEM_STRIDE};
use crate::tensor::optim::{Sgd, SgdConfig};
use crate::tensor::{ParamKind, ParamStore, Shape, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionBatch {
    pub images: Tensor,
    pub targets: Vec<DetectionTarget>,
}

impl DetectionBatch {
    pub fn from_scenes(scenes: &[SyntheticScene], stride: usize) -> Result<Self, TensorError> {
        let first = scenes.first().ok_or(TensorError::Empty("detection batch"))?.image.shape();
        let mut data = Vec::with_capacity(first.numel() * scenes.len());
        for s in scenes {
            if s.image.shape() != first {
                return Err(TensorError::ShapeMismatch {
                    op: "detection batch",
                    left: first,
                    right: s.image.shape(),
                });
            }
            data.extend_from_slice(s.image.data());
        }
        Ok(DetectionBatch {
            images: Tensor::new(Shape::new(scenes.len(), first.c(), first.h(), first.w()), data)?,
            targets: scenes.iter().map(|s| assign_fcos_targets(s, stride)).collect(),
        })
    }
}

/// Splits `scenes` into consecutive batches; the last one may be short.
pub fn make_batches(scenes: &[SyntheticScene], batch_size: usize) -> Result<Vec<DetectionBatch>, TensorError> {
    if batch_size == 0 {
        return Err(TensorError::InvalidArgument("batch_size must be positive".into()));
    }
    scenes
        .chunks(batch_size)
        .map(|c| DetectionBatch::from_scenes(c, STEM_STRIDE))
        .collect()
}

/// The detection loss of a network on a batch.
pub struct DetectionObjective<'a> {
    pub net: &'a DetectionNet,
}

impl DetectionObjective<'_> {
    pub fn loss_with_breakdown(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &DetectionBatch,
    ) -> Result<(Var, LossBreakdown), TensorError> {
        let x = tape.constant(batch.images.clone());
        let out = self.net.forward(tape, store, x)?;
        detection_loss(tape, &out, &batch.targets)
    }
}

impl Objective for DetectionObjective<'_> {
    type Batch = DetectionBatch;

    fn loss(&self, tape: &mut Tape, store: &ParamStore, batch: &DetectionBatch) -> Result<Var, TensorError> {
        Ok(self.loss_with_breakdown(tape, store, batch)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Linear warm-up length in iterations.
    pub warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 600,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 20.0,
            warmup: 50,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, iter: usize) -> f64 {
        if iter < self.warmup {
            self.lr * (iter + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    pub metrics: Metrics,
    pub final_eval_loss: f64,
}

fn numerical(iter: usize, e: TensorError) -> Error {
    match e {
        TensorError::NonFinite(m) => Error::Numerical {
            stage: format!("train step {iter}"),
            message: m,
        },
        other => Error::Tensor(other),
    }
}

/// Plain SGD with momentum over the weights of an already initialised
/// network. Batches are visited in order, cycling.
pub fn train_derived(
    net: &DetectionNet,
    store: &mut ParamStore,
    train: &[DetectionBatch],
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<Vec<TrainRecord>, Error> {
    if config.iters > 0 && train.is_empty() {
        return Err(Error::Config("training needs at least one batch".into()));
    }
    let mut sgd = Sgd::new(SgdConfig {
        lr: config.lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    })?;
    let objective = DetectionObjective { net };
    let mut records = Vec::with_capacity(config.iters);
    for iter in 0..config.iters {
        let mut tape = Tape::new();
        let (loss, parts) = objective
            .loss_with_breakdown(&mut tape, store, &train[iter % train.len()])
            .map_err(|e| numerical(iter, e))?;
        tape.backward(loss, store).map_err(|e| numerical(iter, e))?;
        store.clip_grad_norm(ParamKind::Weight, config.grad_clip)?;
        let lr = config.lr_at(iter);
        sgd.set_lr(lr)?;
        sgd.step(store, ParamKind::Weight)?;
        let rec = TrainRecord {
            iter,
            loss: parts.total(),
            cls: parts.classification,
            reg: parts.regression,
            ctr: parts.centerness,
            lr,
        };
        on_step(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// AP@0.5 and mean loss over `eval` scenes.
pub fn evaluate(
    net: &DetectionNet,
    store: &ParamStore,
    eval: &[SyntheticScene],
    batch_size: usize,
) -> Result<(Metrics, f64), TensorError> {
    let mut dets = Vec::with_capacity(eval.len());
    let mut loss_sum = 0.0;
    let batches = make_batches(eval, batch_size)?;
    for batch in &batches {
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let out = net.forward(&mut tape, store, x)?;
        let (_, parts) = detection_loss(&mut tape, &out, &batch.targets)?;
        loss_sum += parts.total();
        let (cl, bx, ct) = (
            tape.value(out.class_logits),
            tape.value(out.boxes),
            tape.value(out.centerness),
        );
        for n in 0..batch.targets.len() {
            dets.push(decode(cl, bx, ct, n, STEM_STRIDE));
        }
    }
    let gts: Vec<_> = eval.iter().map(|s| s.objects.clone()).collect();
    let metrics = average_precision(&dets, &gts, net.config.num_classes);
    Ok((metrics, loss_sum / batches.len().max(1) as f64))
}

/// Uniformly random valid genotype: each node picks `min(2, j)` distinct
/// predecessors and a non-`none` transformation for each.
pub fn random_genotype(rng: &mut impl Rng, nodes: usize) -> Genotype {
    let convs: Vec<_> = TransformationId::convolutional().collect();
    let groups = (0..NUM_GROUPS)
        .map(|_| GroupGene {
            nodes: (1..=nodes)
                .map(|j| {
                    let mut preds = rand::seq::index::sample(rng, j, j.min(2)).into_vec();
                    preds.sort_unstable();
                    NodeGene {
                        inputs: preds
                            .into_iter()
                            .map(|from| Input {
                                from,
                                trans: convs[rng.random_range(0..convs.len())],
                            })
                            .collect(),
                    }
                })
                .collect(),
        })
        .collect();
    Genotype { groups }
}
