//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines appear in order with their timings.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fad_core::oracle::{
    count_representations, equivalence_check, grad_check_supernet, module_equivalence, tie_weights, GradCheckConfig,
};
use fad_core::search_engine::{
    count_discrete_paths, derive_genotype, enumerate_derivations, should_terminate, Genotype, GroupGene, Input,
    NodeGene,
};
use fad_core::search_space::{receptive_field, SharedBlock, TransformationId, UnsharedBlock, NUM_CANDIDATES};
use fad_core::supernet::{AlphaTable, CellTopology, DetectionNet, SupernetConfig, NUM_GROUPS};
use fad_core::task_harness::classify::{classification_mode_search, ClassificationStudyConfig};
use fad_core::task_harness::study::{detection_study, DetectionStudyConfig, StudyEvent};
use fad_core::tensor::{Faults, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn run(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let o = f();
    let el = t.elapsed();
    let in_time = el <= budget;
    let passed = o.passed && in_time;
    println!(
        "{} criterion {id:>2} {name}: {} [{:.1}s, budget {}s{}]",
        if passed { "PASS" } else { "FAIL" },
        o.detail,
        el.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { ", over budget" }
    );
    passed
}

fn c1() -> Outcome {
    let r = count_representations(8).unwrap();
    let ok = r.shared == 12 && r.unshared == 26 && r.shared_executed == 12 && r.unshared_executed == 26;
    outcome(
        ok,
        format!(
            "shared={} unshared={} executed shared={} unshared={}",
            r.shared, r.unshared, r.shared_executed, r.unshared_executed
        ),
    )
}

fn c2() -> Outcome {
    let shared = SharedBlock::new("s", 8, false).unwrap();
    let unshared = UnsharedBlock::new("u", 8).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    shared.init(&mut store, &mut rng).unwrap();
    unshared.init(&mut store, &mut rng).unwrap();
    tie_weights(&shared, &unshared, &mut store).unwrap();
    let block = equivalence_check(&shared, &store, &unshared, &store, 100, 21, 8, 8).unwrap();
    let cfg = SupernetConfig {
        c: 8,
        c_prime: 8,
        ..SupernetConfig::default()
    };
    let module = module_equivalence(&cfg, 4, 22, 16).unwrap();
    let ok = block.trials >= 100
        && block.per_candidate.len() == 12
        && block.per_candidate.iter().all(|c| c.max_abs_diff <= 1e-5)
        && module.max_abs_diff <= 1e-4;
    outcome(
        ok,
        format!(
            "block max diff {:.2e} over {} inputs x {} candidates, module max diff {:.2e}",
            block.max_abs_diff,
            block.trials,
            block.per_candidate.len(),
            module.max_abs_diff
        ),
    )
}

fn c3() -> Outcome {
    let all = TransformationId::all();
    let mut rfs: Vec<usize> = all.iter().filter_map(|t| receptive_field(*t).ok()).collect();
    rfs.sort();
    let none = all.iter().filter(|t| t.is_none()).count();
    let ok = all.len() == 13 && none == 1 && rfs == [3, 3, 5, 5, 7, 7, 7, 7, 9, 9, 9, 9];
    outcome(ok, format!("{} candidates ({none} none), receptive fields {rfs:?}", all.len()))
}

fn c4() -> Outcome {
    let cfg = SupernetConfig {
        c: 8,
        c_prime: 8,
        ..SupernetConfig::default()
    };
    let net = DetectionNet::supernet(cfg).unwrap();
    let mut store = ParamStore::new();
    net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(40)).unwrap();
    let gc = GradCheckConfig {
        probes: 60,
        eps: 1e-3,
        seed: 41,
        tolerance: 2e-2,
        ..GradCheckConfig::default()
    };
    let r = grad_check_supernet(&net, &store, &gc, Faults::default()).unwrap();
    let alpha = r.probes.iter().filter(|p| p.architecture).count();
    let ok = r.probes.len() >= 50 && alpha > 0 && alpha < r.probes.len() && r.worst_rel_err < 2e-2;
    outcome(
        ok,
        format!(
            "worst relative error {:.2e} over {} probes ({alpha} on alpha) at eps 1e-3",
            r.worst_rel_err,
            r.probes.len()
        ),
    )
}

fn random_table(rng: &mut impl Rng, topo: CellTopology) -> AlphaTable {
    let n = NUM_GROUPS * topo.num_edges() * NUM_CANDIDATES;
    // Coarse values make ties common, exercising the tie-break path.
    let logits = (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                rng.random_range(-2i32..3) as f32 * 0.5
            } else {
                rng.random_range(-3.0f32..3.0)
            }
        })
        .collect();
    AlphaTable::from_rows(NUM_GROUPS, topo.num_edges(), NUM_CANDIDATES, logits).unwrap()
}

fn c5() -> Outcome {
    let topo = CellTopology { nodes: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let trials = 1000;
    for i in 0..trials {
        let table = random_table(&mut rng, topo);
        let g = derive_genotype(&table);
        if let Err(e) = g.validate() {
            return outcome(false, format!("table {i}: {e}"));
        }
        for gr in &g.groups {
            for (k, node) in gr.nodes.iter().enumerate() {
                if node.inputs.len() != (k + 1).min(2) || node.inputs.iter().any(|x| x.trans.is_none()) {
                    return outcome(false, format!("table {i}: node {} has {:?}", k + 1, node.inputs));
                }
            }
        }
        if derive_genotype(&table) != g {
            return outcome(false, format!("table {i}: derivation is not deterministic"));
        }
        let mut shifted = table.clone();
        for gi in 0..NUM_GROUPS {
            for e in 0..topo.num_edges() {
                let s = rng.random_range(-4i32..5) as f32;
                for v in shifted.row_mut(gi, e) {
                    *v += s;
                }
            }
        }
        if derive_genotype(&shifted) != g {
            return outcome(false, format!("table {i}: per-edge shift changed the genotype"));
        }
    }
    outcome(true, format!("{trials} random tables: valid, deterministic, shift invariant"))
}

fn gene(t: usize) -> Genotype {
    let tr = TransformationId::from_index(t).unwrap();
    let node = |j: usize| NodeGene {
        inputs: (0..j.min(2)).map(|from| Input { from, trans: tr }).collect(),
    };
    Genotype {
        groups: vec![
            GroupGene {
                nodes: (1..=3).map(node).collect(),
            };
            NUM_GROUPS
        ],
    }
}

fn c6() -> Outcome {
    let (a, b, c) = (gene(0), gene(1), gene(2));
    let fixed: Vec<(Vec<Genotype>, bool)> = vec![
        (vec![], false),
        (vec![a.clone()], false),
        (vec![a.clone(), b.clone()], false),
        (vec![a.clone(), a.clone()], true),
        (vec![a.clone(), b.clone(), b.clone()], true),
        (vec![a.clone(), b.clone(), a.clone()], false),
        (vec![b.clone(), b.clone(), c.clone()], false),
    ];
    for (h, want) in &fixed {
        if should_terminate(h) != *want {
            return outcome(false, format!("history of {} gave {}", h.len(), !want));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let pool = [a, b, c];
    for _ in 0..500 {
        let len = rng.random_range(0..8);
        let h: Vec<Genotype> = (0..len).map(|_| pool[rng.random_range(0..3)].clone()).collect();
        let want = h.len() >= 2 && h[h.len() - 1] == h[h.len() - 2];
        if should_terminate(&h) != want {
            return outcome(false, format!("random history {h:?}"));
        }
    }
    outcome(true, format!("{} fixed and 500 random histories", fixed.len()))
}

fn c7() -> Outcome {
    let cfg = DetectionStudyConfig::default();
    let r = detection_study(&cfg, |e| match e {
        StudyEvent::Random(i, s) => eprintln!("  random {i}: ap50 {:.4}", s.ap50),
        StudyEvent::Searched(s) => eprintln!("  searched seed {}: ap50 {:.4} {}", s.seed, s.scored.ap50, s.scored.genotype),
    })
    .unwrap();
    let wins = r.searched.iter().filter(|s| s.beats_median).count();
    let aps: Vec<String> = r.searched.iter().map(|s| format!("{:.3}", s.scored.ap50)).collect();
    outcome(
        r.majority && r.random.len() == 10 && r.searched.len() == 3,
        format!(
            "searched AP {} vs random median {:.3}; {wins}/{} at or above",
            aps.join(", "),
            r.median_random_ap,
            r.searched.len()
        ),
    )
}

fn c8() -> Outcome {
    let cfg = ClassificationStudyConfig::default();
    let r = classification_mode_search(&cfg, |run| {
        eprintln!(
            "  decouple={} seed={} fraction {:.3}",
            run.decouple, run.seed, run.shared_trans_fraction
        )
    })
    .unwrap();
    let per: BTreeMap<bool, usize> = r.runs.iter().fold(BTreeMap::new(), |mut m, run| {
        *m.entry(run.decouple).or_default() += 1;
        m
    });
    let enough = per.get(&true).copied().unwrap_or(0) >= 4 && per.get(&false).copied().unwrap_or(0) >= 4;
    outcome(
        enough && r.mean_fraction_decoupled > r.mean_fraction_coupled,
        format!(
            "mean shared_trans_fraction {:.3} with decoupling vs {:.3} without ({} runs each)",
            r.mean_fraction_decoupled, r.mean_fraction_coupled, cfg.runs_per_setting
        ),
    )
}

fn c9() -> Outcome {
    let small = CellTopology { nodes: 2 };
    let closed = count_discrete_paths(small, 3, 1);
    let enumerated = enumerate_derivations(small, 3, 1).len();
    let full = count_discrete_paths(CellTopology { nodes: 3 }, NUM_CANDIDATES - 1, NUM_GROUPS);
    let full_f: f64 = full.to_string().parse().unwrap();
    outcome(
        closed.to_string() == enumerated.to_string(),
        format!(
            "reduced space closed form {closed} = enumerated {enumerated}; full count {full} ({full_f:.2e}), \
             paper reports ~2.3e13 (ratio {:.1})",
            2.3e13 / full_f
        ),
    )
}

fn fad(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fad"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("fad runs")
}

fn c10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let search = |out: &str| {
        fad(
            &[
                "search", "--seed", "7", "--n", "16", "--iters", "40", "--derive-every", "20", "--c", "8", "--out", out,
            ],
            dir,
        )
    };
    let (a, b) = (search("a"), search("b"));
    if !a.status.success() || !b.status.success() {
        return outcome(false, format!("search failed: {}", String::from_utf8_lossy(&a.stderr)));
    }
    let read = |p: &str| std::fs::read(dir.join(p)).unwrap();
    let same_genotype = read("a/genotype.json") == read("b/genotype.json");
    let same_rest = ["metrics.jsonl", "checkpoint.json", "checkpoint.bin"]
        .iter()
        .all(|f| read(&format!("a/{f}")) == read(&format!("b/{f}")));
    let healthy = fad(&["verify", "--report", "healthy.json"], dir);
    let healthy_out = String::from_utf8_lossy(&healthy.stdout).to_string();
    let mut codes = vec![format!("healthy={:?}", healthy.status.code())];
    let mut faults_caught = true;
    for f in ["perturb-weight", "broken-relu"] {
        let r = fad(&["verify", "--inject-fault", f, "--report", "fault.json"], dir);
        codes.push(format!("{f}={:?}", r.status.code()));
        faults_caught &= r.status.code().is_some_and(|c| c != 0);
    }
    let ok = same_genotype
        && same_rest
        && healthy.status.success()
        && healthy_out.contains("representations shared=12 unshared=26")
        && faults_caught;
    outcome(
        ok,
        format!(
            "genotype files identical: {same_genotype}, other artifacts identical: {same_rest}, verify exits {}",
            codes.join(" ")
        ),
    )
}

fn main() {
    // `cargo test -- <filter>` passes extra arguments; honour a criterion
    // number filter and ignore libtest flags.
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| filter.is_empty() || filter.contains(&i);
    let min = |m: u64| Duration::from_secs(60 * m);
    let mut all = true;
    type Criterion = (usize, &'static str, Duration, fn() -> Outcome);
    let list: Vec<Criterion> = vec![
        (1, "representation counts", Duration::from_secs(1), c1),
        (2, "sharing equivalence", min(1), c2),
        (3, "candidate set", Duration::from_secs(1), c3),
        (4, "gradient audit", min(5), c4),
        (5, "genotype derivation", min(1), c5),
        (6, "termination rule", Duration::from_secs(1), c6),
        (7, "searched vs random genotypes", min(120), c7),
        (8, "decoupling raises shared-transformation share", min(120), c8),
        (9, "path count", Duration::from_secs(60), c9),
        (10, "reproducible search and verify faults", min(10), c10),
    ];
    for (id, name, budget, f) in list {
        if want(id) {
            all &= run(id, name, budget, f);
        }
    }
    if !all {
        std::process::exit(1);
    }
}
