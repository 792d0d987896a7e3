//! Brute-force checks: weight tying between shared and unshared blocks,
//! forward equivalence, and finite-difference audits of the supernet.

pub mod equivalence;
pub mod gradcheck;
pub mod tie;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use equivalence::{equivalence_check, module_equivalence, EquivalenceReport, ModuleEquivalence};
pub use gradcheck::{grad_check_supernet, GradCheckConfig, GradCheckReport, GradProbe};
pub use tie::{tie_map, tie_weights, tie_weights_between, LayerBinding, TieMap};

use crate::error::Error;
use crate::search_engine::count_discrete_paths;
use crate::search_space::{SharedBlock, UnsharedBlock, NUM_CANDIDATES};
use crate::supernet::{CellTopology, DetectionNet, SupernetConfig, NUM_GROUPS};
use crate::tensor::{Faults, ParamStore, Shape, Tape, Tensor};

pub const BLOCK_TOLERANCE: f32 = 1e-5;
pub const MODULE_TOLERANCE: f32 = 1e-4;

/// Defects that `verify` must catch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct InjectedFaults {
    /// Nudge one unshared weight after tying.
    pub perturb_weight: bool,
    pub broken_relu_backward: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub seed: u64,
    pub c_prime: usize,
    pub block_trials: usize,
    pub module_trials: usize,
    pub grad: GradCheckConfig,
    pub faults: InjectedFaults,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            c_prime: 8,
            block_trials: 100,
            module_trials: 4,
            grad: GradCheckConfig::default(),
            faults: InjectedFaults::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Representations {
    pub shared: usize,
    pub unshared: usize,
    pub shared_executed: usize,
    pub unshared_executed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub representations: Representations,
    pub tie_bindings: usize,
    pub stem_fan_out: usize,
    pub equivalence: EquivalenceReport,
    pub decoupled_equivalence: EquivalenceReport,
    pub module: ModuleEquivalence,
    pub grad: GradCheckReport,
    pub paths_per_group: String,
    pub paths_total: String,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn check(name: &str, value: f64, limit: f64, passed: bool) -> Check {
    Check {
        name: name.to_string(),
        value,
        limit,
        passed,
    }
}

/// Representation census and executed-conv counters of both block forms.
pub fn count_representations(c_prime: usize) -> Result<Representations, Error> {
    let shared = SharedBlock::new("shared", c_prime, false)?;
    let unshared = UnsharedBlock::new("unshared", c_prime)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    shared.init(&mut store, &mut rng)?;
    unshared.init(&mut store, &mut rng)?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(Shape::new(1, c_prime, 4, 4), 0.5));
    let a = shared.candidate_outputs(&mut tape, &store, x)?;
    let b = unshared.candidate_outputs(&mut tape, &store, x)?;
    Ok(Representations {
        shared: shared.count_representations(),
        unshared: unshared.count_representations(),
        shared_executed: a.representation_convs,
        unshared_executed: b.representation_convs,
    })
}

fn block_equivalence(cfg: &VerifyConfig, decouple: bool) -> Result<(EquivalenceReport, TieMap, SharedBlock), Error> {
    let shared = SharedBlock::new("shared", cfg.c_prime, decouple)?;
    let unshared = UnsharedBlock::new("unshared", cfg.c_prime)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shared.init(&mut store, &mut rng)?;
    unshared.init(&mut store, &mut rng)?;
    let map = tie_weights(&shared, &unshared, &mut store)?;
    if cfg.faults.perturb_weight {
        let target = &map.layers.last().expect("non-empty map").target;
        let name = unshared
            .pipelines
            .iter()
            .flat_map(|(_, l)| l)
            .find(|l| &l.prefix == target)
            .map(|l| l.conv_param_names().remove(0))
            .expect("bound layer exists");
        store.get_mut(&name)?.data_mut()[0] += 0.5;
    }
    let report = equivalence_check(&shared, &store, &unshared, &store, cfg.block_trials, cfg.seed, 8, 8)?;
    Ok((report, map, shared))
}

/// Every check behind the `verify` subcommand.
pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport, Error> {
    let representations = count_representations(cfg.c_prime)?;
    let (equivalence, map, shared) = block_equivalence(cfg, false)?;
    let (decoupled_equivalence, _, _) = block_equivalence(cfg, true)?;
    let stem0 = shared.streams[0].stem[0].as_ref().expect("stem layer").prefix.clone();
    let stem_fan_out = map.fan_out(&stem0);

    let base = SupernetConfig {
        c: 8,
        c_prime: cfg.c_prime,
        ..SupernetConfig::default()
    };
    let module = module_equivalence(&base, cfg.module_trials, cfg.seed, 16)?;

    let net = DetectionNet::supernet(base)?;
    let mut store = ParamStore::new();
    net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let faults = Faults {
        broken_relu_backward: cfg.faults.broken_relu_backward,
    };
    let grad = grad_check_supernet(&net, &store, &cfg.grad, faults)?;

    let topo = CellTopology { nodes: 3 };
    let per_group = count_discrete_paths(topo, NUM_CANDIDATES - 1, 1);
    let total = count_discrete_paths(topo, NUM_CANDIDATES - 1, NUM_GROUPS);

    let r = &representations;
    let checks = vec![
        check("representations shared", r.shared as f64, 12.0, r.shared == 12 && r.shared_executed == 12),
        check("representations unshared", r.unshared as f64, 26.0, r.unshared == 26 && r.unshared_executed == 26),
        check("tie bindings", map.len() as f64, 26.0, map.len() == 26),
        check("stem fan-out", stem_fan_out as f64, 6.0, stem_fan_out == 6),
        check(
            "block equivalence",
            equivalence.max_abs_diff as f64,
            BLOCK_TOLERANCE as f64,
            equivalence.max_abs_diff < BLOCK_TOLERANCE,
        ),
        check(
            "decoupled block equivalence",
            decoupled_equivalence.max_abs_diff as f64,
            BLOCK_TOLERANCE as f64,
            decoupled_equivalence.max_abs_diff < BLOCK_TOLERANCE,
        ),
        check(
            "module equivalence",
            module.max_abs_diff as f64,
            MODULE_TOLERANCE as f64,
            module.max_abs_diff < MODULE_TOLERANCE,
        ),
        check("gradient audit", grad.worst_rel_err, grad.tolerance, grad.passed),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        representations,
        tie_bindings: map.len(),
        stem_fan_out,
        equivalence,
        decoupled_equivalence,
        module,
        grad,
        paths_per_group: per_group.to_string(),
        paths_total: total.to_string(),
        checks,
        passed,
    })
}
