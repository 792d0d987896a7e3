use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::tie::tie_weights_between;
use crate::error::{Error, TensorError};
use crate::search_space::{Block, SharedBlock, TransformationId, UnsharedBlock, Variant};
use crate::supernet::{AlphaTable, DetectionNet, EdgeOp, SupernetConfig};
use crate::tensor::{ParamStore, Shape, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateDiff {
    pub transformation: TransformationId,
    pub max_abs_diff: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub per_candidate: Vec<CandidateDiff>,
    pub max_abs_diff: f32,
}

pub fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Runs both blocks on `trials` random inputs and records, per candidate,
/// the largest absolute difference. With a decoupled shared block the
/// unshared `t1`/`t2` outputs are passed through the matching adapter
/// first, since that is the only place the two constructions differ.
#[allow(clippy::too_many_arguments)]
pub fn equivalence_check(
    shared: &SharedBlock,
    shared_store: &ParamStore,
    unshared: &UnsharedBlock,
    unshared_store: &ParamStore,
    trials: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<EquivalenceReport, TensorError> {
    if shared.c_prime != unshared.c_prime {
        return Err(TensorError::InvalidArgument(format!(
            "block widths differ: {} vs {}",
            shared.c_prime, unshared.c_prime
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<TransformationId> = TransformationId::convolutional().collect();
    let mut worst = vec![0.0f32; ids.len()];
    for _ in 0..trials {
        let x = random_tensor(Shape::new(1, shared.c_prime, height, width), &mut rng);
        let mut tape = Tape::new();
        let xs = tape.constant(x.clone());
        let a = shared.candidate_outputs(&mut tape, shared_store, xs)?;
        let xu = tape.constant(x);
        let b = unshared.candidate_outputs(&mut tape, unshared_store, xu)?;
        for (k, t) in ids.iter().enumerate() {
            let mut want = b.outputs[k];
            if let (TransformationId::Conv(stream, v @ (Variant::T1 | Variant::T2)), true) = (t, shared.decouple) {
                let adapters = shared
                    .stream(*stream)
                    .adapters
                    .as_ref()
                    .expect("decoupled streams carry adapters");
                let h = if *v == Variant::T1 { &adapters[0] } else { &adapters[1] };
                want = h.forward(&mut tape, shared_store, want)?;
            }
            let d = tape.value(a.outputs[k]).max_abs_diff(tape.value(want))?;
            worst[k] = worst[k].max(d);
        }
    }
    let per_candidate: Vec<CandidateDiff> = ids
        .into_iter()
        .zip(&worst)
        .map(|(transformation, d)| CandidateDiff {
            transformation,
            max_abs_diff: *d,
        })
        .collect();
    Ok(EquivalenceReport {
        trials,
        max_abs_diff: worst.iter().copied().fold(0.0, f32::max),
        per_candidate,
    })
}

/// Distinct (shared, unshared) block pairs at matching edge positions.
fn block_pairs<'a>(a: &'a DetectionNet, b: &'a DetectionNet) -> Vec<(&'a SharedBlock, &'a UnsharedBlock)> {
    let blocks = |n: &'a DetectionNet| -> Vec<&'a Block> {
        n.groups
            .iter()
            .flat_map(|g| &g.cells)
            .flat_map(|c| &c.edges)
            .filter_map(|e| match &e.op {
                EdgeOp::Mixed { block, .. } => Some(block),
                EdgeOp::Fixed(_) => None,
            })
            .collect()
    };
    let mut out: Vec<(&SharedBlock, &UnsharedBlock)> = Vec::new();
    for (x, y) in blocks(a).into_iter().zip(blocks(b)) {
        if let (Block::Shared(s), Block::Unshared(u)) = (x, y) {
            if !out.iter().any(|(p, _)| p.prefix == s.prefix) {
                out.push((s, u));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleEquivalence {
    pub trials: usize,
    pub max_abs_diff: f32,
}

/// Builds the supernet twice (shared and unshared blocks, no decoupling),
/// ties every block, copies all other parameters, draws random logits, and
/// compares the three head outputs on random images.
pub fn module_equivalence(
    base: &SupernetConfig,
    trials: usize,
    seed: u64,
    image_size: usize,
) -> Result<ModuleEquivalence, Error> {
    let cfg = |share| SupernetConfig {
        share,
        decouple: false,
        ..base.clone()
    };
    let shared = DetectionNet::supernet(cfg(true))?;
    let unshared = DetectionNet::supernet(cfg(false))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s_store = ParamStore::new();
    shared.init(&mut s_store, &mut rng)?;
    let mut u_store = ParamStore::new();
    unshared.init(&mut u_store, &mut rng)?;
    u_store.load_values_from(&s_store)?;
    for (s, u) in block_pairs(&shared, &unshared) {
        tie_weights_between(s, &s_store, u, &mut u_store)?;
    }
    let mut alphas: AlphaTable = shared.init_alphas();
    let logits: Vec<f32> = (0..alphas.logits().len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    alphas = AlphaTable::from_rows(alphas.groups, alphas.edges, alphas.candidates, logits)?;
    alphas.write_to(&mut s_store)?;
    alphas.write_to(&mut u_store)?;

    let mut worst = 0.0f32;
    for _ in 0..trials {
        let img = Tensor::from_fn(Shape::new(1, base.in_channels, image_size, image_size), |_| {
            rand::Rng::random_range(&mut rng, 0.0f32..1.0)
        });
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let a = shared.forward(&mut tape, &s_store, x)?;
        let y = tape.constant(img);
        let b = unshared.forward(&mut tape, &u_store, y)?;
        for (p, q) in [(a.boxes, b.boxes), (a.centerness, b.centerness), (a.class_logits, b.class_logits)] {
            worst = worst.max(tape.value(p).max_abs_diff(tape.value(q))?);
        }
    }
    Ok(ModuleEquivalence {
        trials,
        max_abs_diff: worst,
    })
}
