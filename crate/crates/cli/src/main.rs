use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use fad_cli::{ConfigError, RunConfig, Task};
use fad_core::error::Error;
use fad_core::oracle::{run_verify, InjectedFaults, VerifyConfig, VerifyReport};
use fad_core::search_engine::{
    build_derived_network, count_discrete_paths, derive_genotype, enumerate_derivations, Genotype, StepRecord,
};
use fad_core::search_space::NUM_CANDIDATES;
use fad_core::supernet::{AlphaTable, CellTopology, DetectionNet, NUM_GROUPS};
use fad_core::task_harness::classify::{
    classification_search_with_store, ClassificationNet, NormalGenotype, ClassificationRun,
};
use fad_core::task_harness::study::{detection_search, eval_params};
use fad_core::task_harness::{evaluate, generate_detection_dataset, make_batches, train_derived, write_cache};
use fad_core::tensor::{checkpoint, ParamKind, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const PAPER_PATHS: &str = "~2.3e13";

#[derive(Parser)]
#[command(name = "fad", version, about = "Architecture search over diverse shared transformations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search the supernet and write genotype.json, metrics.jsonl and a checkpoint.
    Search(SearchArgs),
    /// Derive a genotype from a search checkpoint.
    Derive(DeriveArgs),
    /// Retrain a derived detection network from scratch.
    Train(TrainArgs),
    /// Run the weight-tying, equivalence and gradient audits.
    Verify(VerifyArgs),
    /// Count discrete architectures in the search space.
    Count(CountArgs),
    /// Write a synthetic detection dataset to disk.
    GenData(GenDataArgs),
}

/// Flags that override values from `--config`. Unset flags keep the file
/// value, which itself defaults as listed at the end of `--help`.
#[derive(Args, Default)]
struct Overrides {
    /// JSON run config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<Task>,
    /// Run seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: fad-out].
    #[arg(long = "out")]
    output_dir: Option<PathBuf>,
    /// Cells per group [default: 1].
    #[arg(long = "M")]
    m: Option<usize>,
    /// Group width [default: 16].
    #[arg(long)]
    c: Option<usize>,
    /// Width of the shared representations [default: 8].
    #[arg(long)]
    c_prime: Option<usize>,
    /// Intermediate nodes per cell [default: 3].
    #[arg(long)]
    nodes: Option<usize>,
    /// Adapters after the t1/t2 outputs [default: true].
    #[arg(long, action = ArgAction::Set)]
    decouple: Option<bool>,
    /// Shared-representation blocks, otherwise one filter set per
    /// transformation [default: true].
    #[arg(long, action = ArgAction::Set)]
    share: Option<bool>,
    /// Scenes or images generated for the run [default: 256].
    #[arg(long = "n")]
    data_n: Option<usize>,
    /// Dataset seed [default: 0].
    #[arg(long)]
    data_seed: Option<u64>,
    /// Search iterations [default: 3000].
    #[arg(long)]
    iters: Option<usize>,
    /// Derivation cadence during search [default: 600].
    #[arg(long)]
    derive_every: Option<usize>,
    /// Search batch size [default: 4].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Search weight learning rate [default: 0.004].
    #[arg(long)]
    lr: Option<f64>,
    /// Architecture learning rate [default: 0.003].
    #[arg(long)]
    alpha_lr: Option<f64>,
    /// Stop once two consecutive derivations agree [default: true].
    #[arg(long, action = ArgAction::Set)]
    early_stop: Option<bool>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.task, self.task);
        set!(cfg.seed, self.seed);
        set!(cfg.output_dir, self.output_dir);
        set!(cfg.supernet.m, self.m);
        set!(cfg.supernet.c, self.c);
        set!(cfg.supernet.c_prime, self.c_prime);
        set!(cfg.supernet.nodes, self.nodes);
        set!(cfg.supernet.decouple, self.decouple);
        set!(cfg.supernet.share, self.share);
        set!(cfg.data.n, self.data_n);
        set!(cfg.classify.data.n, self.data_n);
        set!(cfg.data.seed, self.data_seed);
        set!(cfg.classify.data.seed, self.data_seed);
        set!(cfg.schedule.total_iters, self.iters);
        set!(cfg.schedule.derive_every, self.derive_every);
        set!(cfg.schedule.batch_size, self.batch_size);
        set!(cfg.schedule.lr, self.lr);
        set!(cfg.schedule.alpha_lr, self.alpha_lr);
        set!(cfg.schedule.early_stop, self.early_stop);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    o: Overrides,
}

#[derive(Args)]
struct DeriveArgs {
    /// Directory holding checkpoint.json and checkpoint.bin.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write the genotype here instead of stdout.
    #[arg(long = "genotype-out")]
    genotype_out: Option<PathBuf>,
    #[command(flatten)]
    o: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    /// Detection genotype file.
    #[arg(long)]
    genotype: PathBuf,
    /// Retraining iterations [default: 600].
    #[arg(long = "train-iters")]
    train_iters: Option<usize>,
    #[command(flatten)]
    o: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    PerturbWeight,
    BrokenRelu,
}

#[derive(Args)]
struct VerifyArgs {
    /// Seed of every random draw in the audits [default: 0].
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference probes [default: 60].
    #[arg(long, default_value_t = 60)]
    probes: usize,
    /// JSON report path.
    #[arg(long, default_value = "verify.json")]
    report: PathBuf,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Vec<Fault>,
}

#[derive(Args)]
struct CountArgs {
    /// Intermediate nodes per cell.
    #[arg(long, default_value_t = 3)]
    nodes: usize,
    /// Non-none candidates per edge.
    #[arg(long, default_value_t = NUM_CANDIDATES - 1)]
    candidates: usize,
    #[arg(long, default_value_t = NUM_GROUPS)]
    groups: usize,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    o: Overrides,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// JSON-lines sink. Files hold no timestamps so reruns are byte-identical.
struct Jsonl {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Jsonl {
    fn create(path: PathBuf) -> Result<Self, Error> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let f = File::create(&path).map_err(io_err(&path))?;
        Ok(Jsonl {
            out: BufWriter::new(f),
            path,
        })
    }

    fn line(&mut self, v: &impl serde::Serialize) -> Result<(), Error> {
        let s = serde_json::to_string(v).expect("record serializes");
        writeln!(self.out, "{s}").map_err(io_err(&self.path))
    }

    fn finish(mut self) -> Result<(), Error> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

enum Failure {
    Config(String),
    Verify,
    Run(Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn header(cfg: &RunConfig, command: &str) -> Value {
    // The destination is left out so artifacts do not depend on where they land.
    let mut config = serde_json::to_value(cfg).expect("config serializes");
    config.as_object_mut().expect("config is an object").remove("output_dir");
    json!({
        "header": {
            "command": command,
            "task": cfg.task,
            "seed": cfg.seed,
            "decouple": cfg.supernet.decouple,
            "share": cfg.supernet.share,
            "M": cfg.supernet.m,
            "config": config,
        }
    })
}

fn cmd_search(a: SearchArgs) -> Result<(), Failure> {
    let cfg = a.o.resolve()?;
    let dir = cfg.output_dir.clone();
    let mut log = Jsonl::create(dir.join("metrics.jsonl"))?;
    log.line(&header(&cfg, "search"))?;
    let mut write_err = None;
    let mut on_step = |r: &StepRecord| {
        if write_err.is_none() {
            write_err = log.line(r).err();
        }
    };
    match cfg.task {
        Task::Detect => {
            let (out, store) = detection_search(&cfg.data, &cfg.supernet, &cfg.schedule, cfg.seed, &mut on_step)?;
            if let Some(e) = write_err {
                return Err(e.into());
            }
            log.line(&json!({
                "final": {
                    "iterations": out.iterations,
                    "terminated_early": out.terminated_early,
                    "history": out.history.iter().map(|g| g.to_string()).collect::<Vec<_>>(),
                    "genotype": out.genotype.to_string(),
                }
            }))?;
            log.finish()?;
            write_file(&dir.join("genotype.json"), &out.genotype.to_json())?;
            checkpoint::save(&store, &dir, "checkpoint").map_err(Error::from)?;
            println!("genotype {}", out.genotype);
            println!("iterations {} (early stop: {})", out.iterations, out.terminated_early);
        }
        Task::Classify => {
            let study = cfg.classification();
            let (run, store) =
                classification_search_with_store(&study, cfg.supernet.decouple, cfg.seed, &mut on_step)?;
            if let Some(e) = write_err {
                return Err(e.into());
            }
            log.line(&json!({ "final": &run }))?;
            log.finish()?;
            write_file(&dir.join("genotype.json"), &classify_doc(&run))?;
            checkpoint::save(&store, &dir, "checkpoint").map_err(Error::from)?;
            println!("genotype {:?}", run.genotype.selections().map(|o| o.to_string()).collect::<Vec<_>>());
            println!(
                "shared_trans_fraction {:.4} accuracy {:.4}",
                run.shared_trans_fraction, run.accuracy
            );
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn classify_doc(run: &ClassificationRun) -> String {
    let doc = json!({
        "version": 1,
        "task": "classify",
        "normal": &run.genotype,
        "shared_trans_fraction": run.shared_trans_fraction,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("genotype serializes");
    s.push('\n');
    s
}

fn cmd_derive(a: DeriveArgs) -> Result<(), Failure> {
    let cfg = a.o.resolve()?;
    let store = checkpoint::load(&a.checkpoint, "checkpoint").map_err(Error::from)?;
    let text = match cfg.task {
        Task::Detect => {
            let topo = CellTopology {
                nodes: cfg.supernet.nodes,
            };
            let table = AlphaTable::from_store(&store, NUM_GROUPS, topo.num_edges(), NUM_CANDIDATES)
                .map_err(Error::from)?;
            derive_genotype(&table).to_json()
        }
        Task::Classify => {
            let net = ClassificationNet::new(cfg.classification().net).map_err(Error::from)?;
            let s = net.alpha_shape();
            let table = AlphaTable::from_store(&store, s.groups, s.edges, s.candidates).map_err(Error::from)?;
            let g = NormalGenotype::derive(&table);
            let mut t = serde_json::to_string_pretty(&json!({ "version": 1, "task": "classify", "normal": g }))
                .expect("genotype serializes");
            t.push('\n');
            t
        }
    };
    match a.genotype_out {
        Some(p) => write_file(&p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = a.o.resolve()?;
    if cfg.task != Task::Detect {
        return Err(Failure::Config("train supports the detect task only".into()));
    }
    if let Some(i) = a.train_iters {
        cfg.train.iters = i;
    }
    let text = fs::read_to_string(&a.genotype)
        .map_err(|e| Failure::Config(format!("cannot read genotype {}: {e}", a.genotype.display())))?;
    let g = Genotype::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", a.genotype.display())))?;
    if g.groups.len() != NUM_GROUPS || g.groups.iter().any(|gr| gr.nodes.len() != cfg.supernet.nodes) {
        return Err(Failure::Config(format!(
            "genotype has {} groups; expected {NUM_GROUPS} groups of {} nodes",
            g.groups.len(),
            cfg.supernet.nodes
        )));
    }
    let net = build_derived_network(&g, &cfg.supernet).map_err(Error::from)?;
    let mut store = ParamStore::new();
    net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
        .map_err(Error::from)?;
    let module_params = DetectionNet::module_param_count(&store);
    let total_params = store.count_prefix("", ParamKind::Weight);

    let scenes = generate_detection_dataset(&cfg.data).map_err(Error::from)?;
    let eval = generate_detection_dataset(&eval_params(&cfg.data, cfg.eval_size)).map_err(Error::from)?;
    let batches = make_batches(&scenes, cfg.train.batch_size).map_err(Error::from)?;

    let dir = cfg.output_dir.clone();
    let mut log = Jsonl::create(dir.join("metrics.jsonl"))?;
    let mut h = header(&cfg, "train");
    h["header"]["genotype"] = json!(g.to_string());
    h["header"]["module_params"] = json!(module_params);
    h["header"]["total_params"] = json!(total_params);
    log.line(&h)?;
    let mut write_err = None;
    train_derived(&net, &mut store, &batches, &cfg.train, |r| {
        if write_err.is_none() {
            write_err = log.line(r).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let (metrics, eval_loss) = evaluate(&net, &store, &eval, cfg.train.batch_size).map_err(Error::from)?;
    log.line(&json!({
        "eval": {
            "ap50": metrics.ap50,
            "per_class_ap": metrics.per_class_ap,
            "detections": metrics.detections,
            "loss": eval_loss,
            "module_params": module_params,
            "total_params": total_params,
        }
    }))?;
    log.finish()?;
    checkpoint::save(&store, &dir, "model").map_err(Error::from)?;
    println!("parameters module={module_params} total={total_params}");
    println!("eval ap50={:.4} loss={:.4}", metrics.ap50, eval_loss);
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    let mut cfg = VerifyConfig {
        seed: a.seed,
        ..VerifyConfig::default()
    };
    cfg.grad.probes = a.probes;
    cfg.grad.seed = a.seed;
    cfg.faults = InjectedFaults {
        perturb_weight: a.inject_fault.iter().any(|f| matches!(f, Fault::PerturbWeight)),
        broken_relu_backward: a.inject_fault.iter().any(|f| matches!(f, Fault::BrokenRelu)),
    };
    let r: VerifyReport = run_verify(&cfg)?;
    let rep = &r.representations;
    println!("representations shared={} unshared={}", rep.shared, rep.unshared);
    println!(
        "executed representation convs shared={} unshared={}",
        rep.shared_executed, rep.unshared_executed
    );
    if let Some(w) = &r.grad.worst {
        println!(
            "worst finite-difference relative error {:.3e} at {}[{}] (limit {:.0e})",
            r.grad.worst_rel_err, w.name, w.index, r.grad.tolerance
        );
    }
    let num = |v: f64| if v >= 1.0 || v == 0.0 { format!("{v}") } else { format!("{v:.2e}") };
    for c in &r.checks {
        println!(
            "{} {}: {} (limit {})",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            num(c.value),
            num(c.limit)
        );
    }
    println!("paths per group {} total {}", r.paths_per_group, r.paths_total);
    let mut text = serde_json::to_string_pretty(&r).expect("report serializes");
    text.push('\n');
    write_file(&a.report, &text)?;
    if r.passed {
        println!("verify passed");
        Ok(())
    } else {
        println!("verify FAILED");
        Err(Failure::Verify)
    }
}

/// `1234567` as `1,234,567`.
fn group_digits(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn sci(s: &str) -> String {
    let n: f64 = s.parse().unwrap_or(f64::INFINITY);
    format!("{n:.2e}")
}

fn cmd_count(a: CountArgs) -> Result<(), Failure> {
    if a.nodes == 0 || a.candidates == 0 || a.groups == 0 {
        return Err(Failure::Config("nodes, candidates and groups must be positive".into()));
    }
    let topo = CellTopology { nodes: a.nodes };
    let per = count_discrete_paths(topo, a.candidates, 1).to_string();
    let total = count_discrete_paths(topo, a.candidates, a.groups).to_string();
    println!(
        "topology: {} nodes, {} edges, {} candidates per edge",
        a.nodes,
        topo.num_edges(),
        a.candidates
    );
    println!("paths per group: {}", group_digits(&per));
    println!("paths total ({} groups): {} ({})", a.groups, group_digits(&total), sci(&total));
    let small = CellTopology { nodes: 2 };
    let closed = count_discrete_paths(small, 3, 1);
    let enumerated = enumerate_derivations(small, 3, 1).len();
    println!("enumeration check (2 nodes, 3 candidates): closed form {closed}, enumerated {enumerated}");
    println!(
        "paper reports {PAPER_PATHS} unique paths; this count is {} for the implemented topology",
        sci(&total)
    );
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let cfg = a.o.resolve()?;
    if cfg.task != Task::Detect {
        return Err(Failure::Config("gen-data writes detection scenes only".into()));
    }
    let scenes = generate_detection_dataset(&cfg.data).map_err(Error::from)?;
    let index = write_cache(&cfg.output_dir, &cfg.data, &scenes).map_err(Error::from)?;
    println!("wrote {} scenes to {}", index.scenes.len(), cfg.output_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let defaults = RunConfig::default().to_json();
    let cmd = Cli::command().after_long_help(format!("Config file defaults:\n{defaults}"));
    let cmd = cmd.mut_subcommands(|s| s.after_long_help(format!("Config file defaults:\n{defaults}")));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.cmd {
        Cmd::Search(a) => cmd_search(a),
        Cmd::Derive(a) => cmd_derive(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Count(a) => cmd_count(a),
        Cmd::GenData(a) => cmd_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(1),
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
