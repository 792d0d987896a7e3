//! First-order alternating updates of architecture logits and weights.

use serde::{Deserialize, Serialize};

use super::derive::{derive_genotype, should_terminate};
use super::genotype::Genotype;
use crate::error::{Error, TensorError};
use crate::supernet::{AlphaTable, CellTopology};
use crate::tensor::optim::{Adam, AdamConfig, Sgd, SgdConfig};
use crate::tensor::{ParamKind, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    /// Initial weight learning rate.
    pub lr: f64,
    /// Iteration at which the weight learning rate is divided by
    /// `lr_decay_factor`.
    pub lr_decay_step: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Maximum global gradient norm for weight updates.
    pub grad_clip: f64,
    /// Derive a genotype every this many iterations.
    pub derive_every: usize,
    /// Fraction of the training pool reserved for architecture updates.
    pub val_fraction: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub alpha_weight_decay: f64,
    /// Stop as soon as two consecutive derivations agree.
    pub early_stop: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            total_iters: 3000,
            batch_size: 4,
            lr: 0.004,
            lr_decay_step: 2400,
            lr_decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 20.0,
            derive_every: 600,
            val_fraction: 0.5,
            alpha_lr: 3e-3,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            alpha_weight_decay: 1e-3,
            early_stop: true,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: String| Err(TensorError::InvalidArgument(m));
        if self.total_iters == 0 || self.batch_size == 0 || self.derive_every == 0 {
            return bad("total_iters, batch_size and derive_every must be positive".into());
        }
        if !self.total_iters.is_multiple_of(self.derive_every) {
            return bad(format!(
                "derive_every {} must divide total_iters {}",
                self.derive_every, self.total_iters
            ));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor <= 0.0 {
            return bad(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if self.lr < 0.0 || self.alpha_lr < 0.0 || self.lr.is_nan() || self.alpha_lr.is_nan() {
            return bad("learning rates must be non-negative".into());
        }
        Ok(())
    }

    /// Weight learning rate in effect at `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if self.lr_decay_step > 0 && iter >= self.lr_decay_step {
            self.lr / self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.alpha_lr,
            beta1: self.alpha_beta1,
            beta2: self.alpha_beta2,
            eps: 1e-8,
            weight_decay: self.alpha_weight_decay,
        }
    }
}

/// A differentiable task loss over batches of some kind.
pub trait Objective {
    type Batch;
    fn loss(&self, tape: &mut Tape, store: &ParamStore, batch: &Self::Batch) -> Result<Var, TensorError>;
}

/// Shape of the architecture table searched over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlphaShape {
    pub groups: usize,
    pub edges: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    #[serde(rename = "L_train")]
    pub l_train: f64,
    #[serde(rename = "L_val")]
    pub l_val: f64,
    pub alpha_entropy_per_edge: Vec<f64>,
    pub grad_norm_pre_clip: f64,
}

/// Optimizer state and derivation history of a running search.
#[derive(Clone, Debug)]
pub struct SearchState<G = Genotype> {
    pub iteration: usize,
    pub history: Vec<G>,
    pub last_train_loss: Option<f64>,
    pub schedule: ScheduleConfig,
    pub alpha_shape: AlphaShape,
    sgd: Sgd,
    adam: Adam,
}

impl<G> SearchState<G> {
    pub fn new(schedule: ScheduleConfig, alpha_shape: AlphaShape) -> Result<Self, TensorError> {
        schedule.validate()?;
        Ok(SearchState {
            iteration: 0,
            history: Vec::new(),
            last_train_loss: None,
            sgd: Sgd::new(schedule.sgd())?,
            adam: Adam::new(schedule.adam())?,
            schedule,
            alpha_shape,
        })
    }

    pub fn alphas(&self, store: &ParamStore) -> Result<AlphaTable, TensorError> {
        let s = self.alpha_shape;
        AlphaTable::from_store(store, s.groups, s.edges, s.candidates)
    }
}

fn numerical(iter: usize, phase: &str, e: TensorError) -> Error {
    match e {
        TensorError::NonFinite(m) => Error::Numerical {
            stage: format!("search step {iter} ({phase} update)"),
            message: m,
        },
        other => Error::Tensor(other),
    }
}

fn loss_value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

/// One architecture update on `val`, then one weight update on `train`
/// with gradient clipping.
pub fn search_step<O: Objective, G>(
    state: &mut SearchState<G>,
    store: &mut ParamStore,
    objective: &O,
    train: &O::Batch,
    val: &O::Batch,
) -> Result<StepRecord, Error> {
    let iter = state.iteration;

    let mut tape = Tape::new();
    let lv = objective.loss(&mut tape, store, val).map_err(|e| numerical(iter, "architecture", e))?;
    let l_val = loss_value(&tape, lv);
    tape.backward(lv, store).map_err(|e| numerical(iter, "architecture", e))?;
    state.adam.step(store, ParamKind::Architecture)?;

    let mut tape = Tape::new();
    let lt = objective.loss(&mut tape, store, train).map_err(|e| numerical(iter, "weight", e))?;
    let l_train = loss_value(&tape, lt);
    tape.backward(lt, store).map_err(|e| numerical(iter, "weight", e))?;
    let norm = store.clip_grad_norm(ParamKind::Weight, state.schedule.grad_clip)?;
    state.sgd.set_lr(state.schedule.lr_at(iter))?;
    state.sgd.step(store, ParamKind::Weight)?;

    state.iteration += 1;
    state.last_train_loss = Some(l_train);
    Ok(StepRecord {
        iter,
        l_train,
        l_val,
        alpha_entropy_per_edge: state.alphas(store)?.entropy_per_edge(),
        grad_norm_pre_clip: norm,
    })
}

#[derive(Clone, Debug)]
pub struct SearchOutcome<G = Genotype> {
    pub genotype: G,
    pub history: Vec<G>,
    pub records: Vec<StepRecord>,
    pub iterations: usize,
    pub terminated_early: bool,
}

/// Full search loop with periodic derivation. Batches are taken in order,
/// cycling, so the data order is fixed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn run_search<O: Objective, G: PartialEq>(
    store: &mut ParamStore,
    objective: &O,
    train: &[O::Batch],
    val: &[O::Batch],
    schedule: ScheduleConfig,
    alpha_shape: AlphaShape,
    derive: impl Fn(&AlphaTable) -> G,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<SearchOutcome<G>, Error> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("search needs at least one train and one val batch".into()));
    }
    let mut state: SearchState<G> = SearchState::new(schedule, alpha_shape)?;
    let mut records = Vec::new();
    let mut early = false;
    while state.iteration < state.schedule.total_iters {
        let i = state.iteration;
        let rec = search_step(&mut state, store, objective, &train[i % train.len()], &val[i % val.len()])?;
        on_step(&rec);
        records.push(rec);
        if state.iteration.is_multiple_of(state.schedule.derive_every) {
            state.history.push(derive(&state.alphas(store)?));
            if state.schedule.early_stop && should_terminate(&state.history) {
                early = state.iteration < state.schedule.total_iters;
                break;
            }
        }
    }
    let genotype = derive(&state.alphas(store)?);
    Ok(SearchOutcome {
        genotype,
        history: state.history,
        records,
        iterations: state.iteration,
        terminated_early: early,
    })
}

/// [`run_search`] over the detection supernet's logit table.
pub fn run_detection_search<O: Objective>(
    store: &mut ParamStore,
    objective: &O,
    train: &[O::Batch],
    val: &[O::Batch],
    topo: CellTopology,
    schedule: ScheduleConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<SearchOutcome, Error> {
    let shape = AlphaShape {
        groups: crate::supernet::NUM_GROUPS,
        edges: topo.num_edges(),
        candidates: crate::search_space::NUM_CANDIDATES,
    };
    run_search(store, objective, train, val, schedule, shape, derive_genotype, on_step)
}
