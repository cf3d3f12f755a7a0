mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use config::RunConfig;
use mpgnn::bench::{per_graph_config, run_bench, BenchConfig, Variant};
use mpgnn::gnn::{Architecture, GnnModel};
use mpgnn::instance::{
    generate_corpus, load_corpus, load_instance, read_text, write_atomic, write_coloring,
    write_corpus,
};
use mpgnn::nn::Checkpoint;
use mpgnn::refine::{full_pipeline, Stage, StageReport};
use mpgnn::train::{history_csv, TrainState, Trainer};
use mpgnn::verify::{connected_graphs, oracle_check, random_suite, OracleReport};
use mpgnn::{ConflictGraph, Error, Result};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_VERIFY: u8 = 5;

/// Balanced fixed-k conflict-graph coloring for multipatterning.
#[derive(Parser, Debug)]
#[command(name = "mpgnn", version)]
struct Cli {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Forward passes for inference and training.
    #[arg(long, global = true)]
    passes: Option<usize>,
    /// Last pipeline stage to run.
    #[arg(long, global = true, value_enum)]
    stage: Option<StageArg>,
    /// Worker threads; capped by MP_ENGINE_THREADS.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    InferenceOnly,
    Heuristic,
    Full,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::InferenceOnly => Stage::Inference,
            StageArg::Heuristic => Stage::Heuristic,
            StageArg::Full => Stage::Csp,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted synthetic corpus and its manifest.
    Generate(GenerateArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Color instances with a trained model.
    Solve(SolveArgs),
    /// Compare pipeline variants and baselines on a corpus.
    Bench(BenchArgs),
    /// Cross-check the solvers against exhaustive enumeration.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    n_min: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    density: Option<f64>,
    /// Plant a (k+1)-clique in every m-th instance.
    #[arg(long)]
    uncolorable_every: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print every epoch instead of every tenth.
    #[arg(long)]
    verbose: bool,
    /// Train a separate model on each instance.
    #[arg(long, conflicts_with = "resume")]
    per_instance: bool,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Individual instance files (DIMACS `.col` or native edge list).
    #[arg(long = "instance")]
    instances: Vec<PathBuf>,
    /// Skip annealing.
    #[arg(long)]
    no_sa: bool,
    /// Leave wall times out of the reports.
    #[arg(long)]
    no_timings: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Checkpoints as `path` or `label=path`; repeatable.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated variant names.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Comma-separated pass counts for the sweep.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<usize>,
    #[arg(long)]
    no_timings: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Also run the full pipeline with this model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    max_nodes: Option<usize>,
    #[arg(long)]
    random: Option<usize>,
    #[arg(long)]
    max_random_nodes: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) | Error::Checkpoint(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Parse { .. } | Error::Json(_) | Error::InvalidGraph(_) => EXIT_IO,
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(k) = cli.k {
        cfg.k = k;
    }
    if let Some(p) = cli.passes {
        cfg.pipeline.inference.forward_passes = p;
        cfg.train.forward_passes = p;
    }
    if let Some(s) = cli.stage {
        cfg.pipeline.last_stage = s.into();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.propagate();
    Ok(cfg)
}

fn init_pool(jobs: Option<usize>) -> Result<()> {
    let mut n = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if let Ok(cap) = std::env::var("MP_ENGINE_THREADS") {
        let cap: usize = cap.trim().parse().ok().filter(|&c| c > 0).ok_or_else(|| {
            Error::Config(format!(
                "MP_ENGINE_THREADS must be a positive integer, got `{cap}`"
            ))
        })?;
        n = n.min(cap);
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = resolve(&cli)?;
    init_pool(cfg.jobs)?;
    match cli.command {
        Command::Generate(a) => generate(&mut cfg, a),
        Command::Train(a) => train(&mut cfg, a),
        Command::Solve(a) => solve(&mut cfg, a),
        Command::Bench(a) => bench(&mut cfg, a),
        Command::Verify(a) => verify(&mut cfg, a),
    }
}

fn out_dir(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn save_run_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&dir.join("run_config.json"), cfg)
}

fn generate(cfg: &mut RunConfig, a: GenerateArgs) -> Result<u8> {
    let spec = &mut cfg.generate;
    if let Some(v) = a.count {
        spec.count = v;
    }
    if let Some(v) = a.n_min {
        spec.n_min = v;
    }
    if let Some(v) = a.n_max {
        spec.n_max = v;
    }
    if let Some(v) = a.density {
        spec.density = v;
    }
    if let Some(v) = a.uncolorable_every {
        spec.uncolorable_every = v;
    }
    cfg.validate()?;
    let dir = out_dir(cfg, "corpus");
    let (manifest, items) = generate_corpus(&cfg.generate)?;
    write_corpus(&dir, &manifest, &items)?;
    println!(
        "wrote {} instances to {} (seed {})",
        items.len(),
        dir.display(),
        manifest.seed
    );
    Ok(0)
}

fn corpus_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.corpus.clone()).ok_or_else(|| {
        Error::Config("no corpus given (use --corpus or `corpus` in the config)".into())
    })
}

/// `(name, graph)` pairs with `k` set to the run's value.
fn load_graphs(dir: &Path, k: usize) -> Result<Vec<(String, ConflictGraph)>> {
    load_corpus(dir)?
        .into_iter()
        .map(|item| {
            let g = item.instance.graph;
            let g = if g.k() == k { g } else { g.with_k(k)? };
            Ok((item.name, g))
        })
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let ck: Checkpoint = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(ck)
}

fn load_model(path: &Path, k: usize) -> Result<GnnModel> {
    let model = GnnModel::from_checkpoint(&load_checkpoint(path)?)?;
    if model.k() != k {
        return Err(Error::Config(format!(
            "checkpoint {} has k = {}, run has k = {k}",
            path.display(),
            model.k()
        )));
    }
    Ok(model)
}

fn train(cfg: &mut RunConfig, a: TrainArgs) -> Result<u8> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if a.corpus.is_some() {
        cfg.corpus = a.corpus.clone();
    }
    cfg.validate()?;
    let corpus_dir = corpus_path(None, cfg)?;
    if a.per_instance {
        return train_per_instance(cfg, &load_graphs(&corpus_dir, cfg.k)?);
    }
    let graphs: Vec<ConflictGraph> = load_graphs(&corpus_dir, cfg.k)?
        .into_iter()
        .map(|(_, g)| g)
        .collect();
    let (mut model, resumed) = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let model = GnnModel::from_checkpoint(&ck)?;
            let state: TrainState = serde_json::from_value(ck.meta["train_state"].clone())
                .map_err(|e| {
                    Error::Checkpoint(format!("{}: no training state: {e}", p.display()))
                })?;
            (model, Some(state))
        }
        None => (
            GnnModel::new(
                Architecture::new(cfg.k),
                mpgnn::rng::derive_seed(cfg.seed, "model-init", 0),
            )?,
            None,
        ),
    };
    if model.k() != cfg.k {
        return Err(Error::Config(format!(
            "resumed model has k = {}, run has k = {}",
            model.k(),
            cfg.k
        )));
    }
    let dir = out_dir(cfg, "model");
    let start = std::time::Instant::now();
    let (history, state) = {
        let mut trainer = Trainer::new(&mut model, cfg.loss.clone(), cfg.train.clone())?;
        if let Some(s) = resumed {
            trainer = trainer.resume(s);
        }
        let history = trainer.run_with(&graphs, |r| {
            if a.verbose || r.epoch % 10 == 0 {
                eprintln!(
                    "epoch {:>4} {:?} l1 {:.4} l2 {:.6} beta {}",
                    r.epoch, r.stage, r.l1, r.l2, r.beta
                );
            }
        })?;
        (history, trainer.state().clone())
    };
    let meta = serde_json::json!({
        "train_state": state,
        "loss": cfg.loss,
        "train": cfg.train,
    });
    write_json(&dir.join("model.json"), &model.to_checkpoint(meta))?;
    write_atomic(&dir.join("history.csv"), history_csv(&history).as_bytes())?;
    save_run_config(&dir, cfg)?;
    let last = history.last().map(|r| r.l1).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs in {:.1}s, final l1 {last:.4}; checkpoint {}",
        history.len(),
        start.elapsed().as_secs_f64(),
        dir.join("model.json").display()
    );
    Ok(0)
}

fn train_per_instance(cfg: &RunConfig, graphs: &[(String, ConflictGraph)]) -> Result<u8> {
    let dir = out_dir(cfg, "model");
    let rows: Vec<String> = graphs
        .par_iter()
        .enumerate()
        .map(|(i, (name, g))| -> Result<String> {
            let mut model = GnnModel::new(
                Architecture::new(cfg.k),
                mpgnn::rng::derive_seed(cfg.seed, "model-init", i as u64),
            )?;
            let (history, state) =
                mpgnn::train::train(&mut model, std::slice::from_ref(g), &cfg.loss, &cfg.train)?;
            let meta =
                serde_json::json!({ "train_state": state, "loss": cfg.loss, "train": cfg.train });
            write_json(
                &dir.join("models").join(format!("{name}.json")),
                &model.to_checkpoint(meta),
            )?;
            write_atomic(
                &dir.join("histories").join(format!("{name}.csv")),
                history_csv(&history).as_bytes(),
            )?;
            let inference = per_graph_config(&cfg.pipeline, cfg.seed, i).inference;
            let c = mpgnn::harden(&model.iterative_inference(g, &inference)?);
            let last = history.last().map(|r| r.l1).unwrap_or(f64::NAN);
            Ok(format!(
                "{name},{},{},{last},{},{}",
                g.node_count(),
                g.edge_count(),
                mpgnn::conflict_count(g, &c)?,
                mpgnn::balance_stats(g, &c)?.max_spread
            ))
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("graph,nodes,edges,final_l1,conflicts,max_spread\n");
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    write_atomic(&dir.join("per_instance.csv"), csv.as_bytes())?;
    save_run_config(&dir, cfg)?;
    let solved = rows
        .iter()
        .filter(|r| r.split(',').nth(4) == Some("0"))
        .count();
    println!(
        "trained {} per-instance models; {solved} conflict-free after inference; outputs in {}",
        rows.len(),
        dir.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct SolveSummary {
    graphs: usize,
    solved: usize,
    solve_pct: f64,
    uncolorable: Vec<String>,
    timed_out: Vec<String>,
}

fn solve(cfg: &mut RunConfig, a: SolveArgs) -> Result<u8> {
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    if a.corpus.is_some() {
        cfg.corpus = a.corpus.clone();
    }
    if a.no_sa {
        cfg.pipeline.sa_enabled = false;
    }
    if a.no_timings {
        cfg.pipeline.record_timings = false;
    }
    cfg.validate()?;
    let ck = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("no checkpoint given (use --checkpoint)".into()))?;
    let model = load_model(&ck, cfg.k)?;
    let graphs: Vec<(String, ConflictGraph)> = if a.instances.is_empty() {
        load_graphs(&corpus_path(None, cfg)?, cfg.k)?
    } else {
        a.instances
            .iter()
            .map(|p| {
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string());
                Ok((name, load_instance(p, cfg.k)?.graph))
            })
            .collect::<Result<_>>()?
    };
    let dir = out_dir(cfg, "solve");
    let results: Vec<(mpgnn::Coloring, StageReport)> = graphs
        .par_iter()
        .enumerate()
        .map(|(i, (_, g))| full_pipeline(g, &model, &per_graph_config(&cfg.pipeline, cfg.seed, i)))
        .collect::<Result<_>>()?;
    for ((name, _), (c, report)) in graphs.iter().zip(&results) {
        write_atomic(
            &dir.join("colorings").join(format!("{name}.coloring")),
            write_coloring(c).as_bytes(),
        )?;
        write_json(&dir.join("reports").join(format!("{name}.json")), report)?;
    }
    let solved = results.iter().filter(|(_, r)| r.solved()).count();
    let pick = |f: fn(&StageReport) -> bool| -> Vec<String> {
        graphs
            .iter()
            .zip(&results)
            .filter(|(_, (_, r))| f(r))
            .map(|((n, _), _)| n.clone())
            .collect()
    };
    let summary = SolveSummary {
        graphs: graphs.len(),
        solved,
        solve_pct: 100.0 * solved as f64 / graphs.len().max(1) as f64,
        uncolorable: pick(|r| r.uncolorable),
        timed_out: pick(|r| r.timed_out),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    save_run_config(&dir, cfg)?;
    println!(
        "solved {}/{} ({:.2}%); outputs in {}",
        summary.solved,
        summary.graphs,
        summary.solve_pct,
        dir.display()
    );
    for name in &summary.uncolorable {
        println!("uncolorable instance: {name}");
    }
    Ok(0)
}

fn parse_checkpoint_arg(s: &str) -> (String, PathBuf) {
    match s.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(s);
            let label = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| s.to_string());
            (label, p)
        }
    }
}

fn bench(cfg: &mut RunConfig, a: BenchArgs) -> Result<u8> {
    if a.corpus.is_some() {
        cfg.corpus = a.corpus.clone();
    }
    if !a.variants.is_empty() {
        cfg.bench.variants = a
            .variants
            .iter()
            .map(|v| v.trim().parse::<Variant>())
            .collect::<Result<_>>()?;
    }
    if !a.sweep.is_empty() {
        cfg.bench.sweep_passes = a.sweep.clone();
    }
    if a.no_timings {
        cfg.pipeline.record_timings = false;
    }
    cfg.validate()?;
    let mut specs: Vec<(String, PathBuf)> = a
        .checkpoints
        .iter()
        .map(|s| parse_checkpoint_arg(s))
        .collect();
    if specs.is_empty() {
        if let Some(p) = &cfg.checkpoint {
            specs.push(parse_checkpoint_arg(&p.to_string_lossy()));
        }
        for m in &cfg.bench.models {
            specs.push((m.label.clone(), m.path.clone()));
        }
    }
    let models: Vec<(String, GnnModel)> = specs
        .iter()
        .map(|(l, p)| Ok((l.clone(), load_model(p, cfg.k)?)))
        .collect::<Result<_>>()?;
    let refs: Vec<(String, &GnnModel)> = models.iter().map(|(l, m)| (l.clone(), m)).collect();
    let graphs = load_graphs(&corpus_path(None, cfg)?, cfg.k)?;
    let bc = BenchConfig {
        variants: cfg.bench.variants.clone(),
        pipeline: cfg.pipeline.clone(),
        sweep_passes: cfg.bench.sweep_passes.clone(),
        seed: cfg.seed,
    };
    let report = run_bench(&graphs, &refs, &bc)?;
    let dir = out_dir(cfg, "bench");
    write_json(&dir.join("bench.json"), &report)?;
    write_atomic(&dir.join("bench_rows.csv"), report.rows_csv().as_bytes())?;
    write_atomic(&dir.join("bench_table.csv"), report.table_csv().as_bytes())?;
    write_atomic(&dir.join("sweep.dat"), report.sweep_table().as_bytes())?;
    save_run_config(&dir, cfg)?;
    println!(
        "{:<10} {:<14} {:>8} {:>10} {:>10}",
        "model", "variant", "solve%", "avg_err", "std_err"
    );
    for r in &report.aggregates {
        let model = if r.model.is_empty() { "-" } else { &r.model };
        println!(
            "{model:<10} {:<14} {:>8.2} {:>10.3} {:>10.3}",
            r.variant.name(),
            r.solve_pct,
            r.mean_max_spread,
            r.std_max_spread
        );
    }
    if !report.sweep.is_empty() {
        println!();
        print!("{}", report.sweep_table());
    }
    Ok(0)
}

fn verify(cfg: &mut RunConfig, a: VerifyArgs) -> Result<u8> {
    let v = &mut cfg.verify;
    if let Some(n) = a.max_nodes {
        v.max_exhaustive_nodes = n;
    }
    if let Some(n) = a.random {
        v.random_graphs = n;
    }
    if let Some(n) = a.max_random_nodes {
        v.max_random_nodes = n;
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    cfg.validate()?;
    let v = cfg.verify.clone();
    if !(1..=8).contains(&v.max_exhaustive_nodes) {
        return Err(Error::Config("max_nodes must lie in 1..=8".into()));
    }
    if !(1..=mpgnn::baselines::BRUTE_FORCE_LIMIT).contains(&v.max_random_nodes) {
        return Err(Error::Config(format!(
            "max_random_nodes must lie in 1..={}",
            mpgnn::baselines::BRUTE_FORCE_LIMIT
        )));
    }
    let model = match &cfg.checkpoint {
        Some(p) => Some(load_model(p, cfg.k)?),
        None => None,
    };
    let mut pipeline = cfg.pipeline.clone();
    pipeline.record_timings = false;
    let mut total = OracleReport::default();
    for n in 1..=v.max_exhaustive_nodes {
        let graphs = connected_graphs(n, cfg.k);
        let rep = oracle_check(&graphs, &format!("connected{n}"), model.as_ref(), &pipeline)?;
        println!(
            "connected graphs on {n} nodes: {:>4} checked, {:>4} colorable, {}",
            rep.graphs,
            rep.colorable,
            if rep.passed() { "ok" } else { "MISMATCH" }
        );
        total.merge(rep);
    }
    let graphs = random_suite(v.random_graphs, v.max_random_nodes, cfg.k, cfg.seed);
    let rep = oracle_check(&graphs, "random", model.as_ref(), &pipeline)?;
    println!(
        "random graphs (<= {} nodes): {:>4} checked, {:>4} colorable, {}",
        v.max_random_nodes,
        rep.graphs,
        rep.colorable,
        if rep.passed() { "ok" } else { "MISMATCH" }
    );
    total.merge(rep);
    if let Some(dir) = &cfg.out {
        write_json(&dir.join("verify.json"), &total)?;
    }
    for line in total
        .verdict_mismatches
        .iter()
        .chain(&total.bound_violations)
        .chain(&total.unsound)
    {
        println!("  {line}");
    }
    Ok(if total.passed() { 0 } else { EXIT_VERIFY })
}
