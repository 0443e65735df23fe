use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use toml::{Table, Value};

use dre_rank::checkpoint;
use dre_rank::config::{Artifacts, RunConfig, RunManifest};
use dre_rank::curves;
use dre_rank::data::{load_dataset, InputFormat, InteractionDataset, Split};
use dre_rank::eval::{evaluate, MetricReport};
use dre_rank::model::{Backbone, PropagationGraph, ScorerModel};
use dre_rank::risk::RiskFamily;
use dre_rank::synth::{self, SynthConfig};
use dre_rank::trainer::{train_full, OptimizerKind, TrainLog};
use dre_rank::weighting::Weighting;
use dre_rank::Error;

#[derive(Parser)]
#[command(
    name = "dre-rank",
    version,
    about = "Top-K ranking from implicit feedback with density-ratio risks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a self-describing run directory.
    Train(TrainArgs),
    /// Score a checkpoint on the validation or test split.
    Eval(EvalArgs),
    /// Train over a grid of lambda and d_bar values.
    Sweep(SweepArgs),
    /// Generate a synthetic corpus with its ground-truth ratio table.
    Synth(SynthArgs),
    /// Merge training logs into one CSV and summarise convergence.
    Curves(CurvesArgs),
    /// Print dataset statistics.
    Stats(StatsArgs),
}

/// One flag per configuration key. Unset flags leave the key untouched.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long = "risk", alias = "family")]
    family: Option<RiskFamily>,
    #[arg(long)]
    weighting: Option<Weighting>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    is_correction: Option<bool>,
    #[arg(long = "nn", alias = "nn-correction", num_args = 0..=1, default_missing_value = "true")]
    nn_correction: Option<bool>,
    #[arg(long = "dbar", alias = "d-bar")]
    d_bar: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long)]
    c0: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long = "lr", alias = "learning-rate")]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long = "patience", alias = "early-stop-patience")]
    early_stop_patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_users: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    backbone: Option<Backbone>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long = "layers", alias = "num-layers")]
    num_layers: Option<usize>,
    #[arg(long)]
    init_std: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    format: Option<InputFormat>,
}

fn put<T: Serialize>(t: &mut Table, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        t.insert(key.into(), Value::try_from(v).expect("scalar flag"));
    }
}

impl Overrides {
    fn to_table(&self) -> Table {
        let mut t = Table::new();
        put(&mut t, "family", &self.family);
        put(&mut t, "weighting", &self.weighting);
        put(&mut t, "is_correction", &self.is_correction);
        put(&mut t, "nn_correction", &self.nn_correction);
        put(&mut t, "d_bar", &self.d_bar);
        put(&mut t, "lambda", &self.lambda);
        put(&mut t, "c0", &self.c0);
        put(&mut t, "alpha", &self.alpha);
        put(&mut t, "optimizer", &self.optimizer);
        put(&mut t, "learning_rate", &self.learning_rate);
        put(&mut t, "epochs", &self.epochs.map(|v| v as i64));
        put(&mut t, "eval_every", &self.eval_every.map(|v| v as i64));
        put(
            &mut t,
            "early_stop_patience",
            &self.early_stop_patience.map(|v| v as i64),
        );
        put(&mut t, "seed", &self.seed.map(|v| v as i64));
        put(&mut t, "batch_users", &self.batch_users.map(|v| v as i64));
        put(&mut t, "k", &self.k.map(|v| v as i64));
        put(&mut t, "backbone", &self.backbone);
        put(&mut t, "dim", &self.dim.map(|v| v as i64));
        put(&mut t, "num_layers", &self.num_layers.map(|v| v as i64));
        put(&mut t, "init_std", &self.init_std);
        put(&mut t, "val_fraction", &self.val_fraction);
        put(&mut t, "format", &self.format);
        t
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Interaction file, or a directory with train/val/test files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Flat TOML file of configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeat the run described by an earlier manifest.
    #[arg(long, conflicts_with_all = ["data", "config"])]
    manifest: Option<PathBuf>,
    /// Frozen checkpoint for static hard weighting.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    run: Option<PathBuf>,
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "adjacency-text")]
    format: InputFormat,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Where to write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "sweeps")]
    out_dir: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        allow_negative_numbers = true,
        default_value = "0.01,0.02,0.03,0.04,0.05,0.06,0.07,0.08,0.09"
    )]
    lambdas: Vec<f64>,
    #[arg(
        long,
        value_delimiter = ',',
        allow_negative_numbers = true,
        default_value = "10,20,30,40,50,60,70,80,90"
    )]
    dbars: Vec<f64>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    items: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 40)]
    positives: usize,
    #[arg(long)]
    min_positives: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    test_fraction: f64,
    #[arg(long, default_value_t = 2.0)]
    logit_scale: f64,
    #[arg(long, default_value_t = 0.0)]
    popularity_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurvesArgs {
    /// `method=path` where path is a trainlog.jsonl or a run directory.
    #[arg(long = "log", required = true)]
    logs: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    fraction: f64,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "adjacency-text")]
    format: InputFormat,
}

fn usage_error(msg: &str) -> anyhow::Error {
    anyhow::Error::new(Error::Config(msg.to_string()))
}

fn resolve_config(file: Option<&Path>, overrides: &Overrides) -> anyhow::Result<RunConfig> {
    let base = match file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(base.merged(&overrides.to_table())?)
}

/// Loads a corpus and carves a validation split when none ships with it.
fn prepare_dataset(path: &Path, cfg: &RunConfig) -> anyhow::Result<InteractionDataset> {
    let ds = load_dataset(path, cfg.data.format).with_context(|| format!("loading dataset {}", path.display()))?;
    if ds.has_split(Split::Validation) || cfg.data.val_fraction == 0.0 {
        return Ok(ds);
    }
    Ok(ds.split_holdout(cfg.data.val_fraction, cfg.train.seed)?)
}

fn fresh_run_dir(root: &Path, hash: &str) -> anyhow::Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{stamp}-{hash}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

#[derive(Serialize)]
struct RunMetrics {
    best_epoch: Option<usize>,
    stopped_early: bool,
    iterations: u64,
    validation: Option<MetricReport>,
    test: Option<MetricReport>,
}

struct RunResult {
    dir: PathBuf,
    metrics: RunMetrics,
}

fn write_with<F>(path: &Path, f: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", path.display()))
}

fn execute_run(cfg: RunConfig, data: &Path, reference: Option<&Path>, out_root: &Path) -> anyhow::Result<RunResult> {
    let ds = prepare_dataset(data, &cfg)?;
    let ref_model = reference
        .map(|p| checkpoint::load(p).with_context(|| format!("loading reference {}", p.display())))
        .transpose()?;
    let dir = fresh_run_dir(out_root, &cfg.hash8())?;
    let artifacts = Artifacts::in_dir(&dir);
    let manifest = RunManifest {
        config_hash: cfg.hash8(),
        data_path: data.to_path_buf(),
        dataset: ds.fingerprint(),
        seed: cfg.train.seed,
        reference_checkpoint: reference.map(Path::to_path_buf),
        created: chrono::Local::now().to_rfc3339(),
        artifacts: artifacts.clone(),
        config: cfg.clone(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    log::info!("run directory {}", dir.display());

    let model = cfg.model.build(ds.num_users(), ds.num_items(), cfg.train.seed)?;
    let outcome = train_full(&ds, model, &cfg.risk, &cfg.train, ref_model.as_ref())?;
    checkpoint::save(&outcome.best, &artifacts.checkpoint_best)?;
    checkpoint::save(&outcome.last, &artifacts.checkpoint_final)?;
    write_with(&artifacts.train_log_jsonl, |w| outcome.log.write_jsonl(w))?;
    write_with(&artifacts.train_log_csv, |w| outcome.log.write_csv(w))?;

    let graph = PropagationGraph::from_dataset(&ds);
    let (u, i) = outcome.best.propagate(&graph);
    let report = |split| -> anyhow::Result<Option<MetricReport>> {
        if ds.has_split(split) {
            Ok(Some(evaluate(&u, &i, &ds, split, cfg.train.k)?))
        } else {
            Ok(None)
        }
    };
    let metrics = RunMetrics {
        best_epoch: outcome.log.best_epoch,
        stopped_early: outcome.log.stopped_early,
        iterations: outcome.log.records.last().map_or(0, |r| r.iteration),
        validation: report(Split::Validation)?,
        test: report(Split::Test)?,
    };
    let json = serde_json::to_string_pretty(&metrics)?;
    fs::write(&artifacts.metrics, json).with_context(|| format!("writing {}", artifacts.metrics.display()))?;
    Ok(RunResult { dir, metrics })
}

fn print_report(label: &str, r: &MetricReport) {
    println!("{label}\trecall@{}\t{:.6}", r.k, r.recall_at_k);
    println!("{label}\tndcg@{}\t{:.6}", r.k, r.ndcg_at_k);
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let (cfg, data, reference) = match &args.manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            let cfg = m.config.merged(&args.overrides.to_table())?;
            let reference = args.reference.clone().or(m.reference_checkpoint);
            let ds = prepare_dataset(&m.data_path, &cfg)?;
            if ds.fingerprint() != m.dataset {
                bail!(
                    "dataset at {} no longer matches the manifest fingerprint",
                    m.data_path.display()
                );
            }
            (cfg, m.data_path, reference)
        }
        None => {
            let data = args
                .data
                .clone()
                .ok_or_else(|| usage_error("--data is required (or --manifest)"))?;
            let cfg = resolve_config(args.config.as_deref(), &args.overrides)?;
            (cfg, data, args.reference.clone())
        }
    };
    let run = execute_run(cfg, &data, reference.as_deref(), &args.out_dir)?;
    println!("run\t{}", run.dir.display());
    match &run.metrics.validation {
        Some(r) => print_report("validation", r),
        None => println!("validation\tnone"),
    }
    if let Some(r) = &run.metrics.test {
        print_report("test", r);
    }
    Ok(())
}

fn load_for_eval(args: &EvalArgs) -> anyhow::Result<(ScorerModel, InteractionDataset, Option<PathBuf>)> {
    if let Some(run) = &args.run {
        let m = RunManifest::load(&run.join("manifest.json"))?;
        let model = checkpoint::load(&run.join("checkpoint-best.ckpt"))?;
        let ds = prepare_dataset(&m.data_path, &m.config)?;
        return Ok((model, ds, Some(run.clone())));
    }
    let (Some(ckpt), Some(data)) = (&args.checkpoint, &args.data) else {
        return Err(usage_error("either --run or both --checkpoint and --data are required"));
    };
    let model = checkpoint::load(ckpt)?;
    let ds = load_dataset(data, args.format)?;
    Ok((model, ds, None))
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (model, ds, run_dir) = load_for_eval(&args)?;
    if model.num_users() != ds.num_users() || model.num_items() != ds.num_items() {
        bail!(
            "checkpoint covers {}x{} but the dataset is {}x{}",
            model.num_users(),
            model.num_items(),
            ds.num_users(),
            ds.num_items()
        );
    }
    let graph = PropagationGraph::from_dataset(&ds);
    let (u, i) = model.propagate(&graph);
    let report = evaluate(&u, &i, &ds, args.split, args.k)?;
    print_report(&args.split.to_string(), &report);
    let out = args
        .out
        .clone()
        .or_else(|| run_dir.map(|d| d.join(format!("eval-{}-k{}.json", args.split, args.k))));
    if let Some(path) = out {
        fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    lambda: f64,
    d_bar: f64,
    status: String,
    val_recall: Option<f64>,
    val_ndcg: Option<f64>,
    run_dir: Option<PathBuf>,
    error: Option<String>,
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let data = args.data.clone().ok_or_else(|| usage_error("--data is required"))?;
    let base = resolve_config(args.config.as_deref(), &args.overrides)?;
    if args.lambdas.is_empty() || args.dbars.is_empty() {
        return Err(usage_error("both grids need at least one value"));
    }
    let root = fresh_run_dir(&args.out_dir, &base.hash8())?;
    let mut rows = Vec::new();
    for &lambda in &args.lambdas {
        for &d_bar in &args.dbars {
            let mut point = Table::new();
            point.insert("lambda".into(), Value::Float(lambda));
            point.insert("d_bar".into(), Value::Float(d_bar));
            let outcome = base
                .merged(&point)
                .map_err(anyhow::Error::from)
                .and_then(|cfg| execute_run(cfg, &data, args.reference.as_deref(), &root));
            let row = match outcome {
                Ok(run) => SweepRow {
                    lambda,
                    d_bar,
                    status: "ok".into(),
                    val_recall: run.metrics.validation.as_ref().map(|r| r.recall_at_k),
                    val_ndcg: run.metrics.validation.as_ref().map(|r| r.ndcg_at_k),
                    run_dir: Some(run.dir),
                    error: None,
                },
                Err(e) => {
                    log::warn!("grid point lambda={lambda} d_bar={d_bar} failed: {e:#}");
                    SweepRow {
                        lambda,
                        d_bar,
                        status: "failed".into(),
                        val_recall: None,
                        val_ndcg: None,
                        run_dir: None,
                        error: Some(format!("{e:#}")),
                    }
                }
            };
            rows.push(row);
        }
    }
    rows.sort_by(|a, b| {
        let key = |r: &SweepRow| r.val_ndcg.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a))
    });
    let summary = root.join("summary.csv");
    write_with(&summary, |w| {
        writeln!(w, "rank,lambda,d_bar,status,val_recall,val_ndcg,run_dir,error")?;
        for (n, r) in rows.iter().enumerate() {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let err = r.error.as_deref().unwrap_or("").replace(['"', '\n'], "'");
            writeln!(
                w,
                "{},{},{},{},{},{},{},\"{}\"",
                n + 1,
                r.lambda,
                r.d_bar,
                r.status,
                opt(r.val_recall),
                opt(r.val_ndcg),
                r.run_dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default(),
                err
            )?;
        }
        Ok(())
    })?;
    fs::write(root.join("summary.json"), serde_json::to_string_pretty(&rows)?)?;
    println!("summary\t{}", summary.display());
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    println!("points\t{}\tfailed\t{failed}", rows.len());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        users: args.users,
        items: args.items,
        latent_dim: args.dim,
        positives: args.positives,
        min_positives: args.min_positives,
        logit_scale: args.logit_scale,
        popularity_std: args.popularity_std,
        test_fraction: args.test_fraction,
        seed: args.seed,
    };
    let corpus = synth::generate(&cfg)?;
    corpus.write(&args.out)?;
    let s = corpus.dataset.stats();
    println!(
        "synth\t{}\tusers {}\titems {}\tinteractions {}",
        args.out.display(),
        s.users,
        s.items,
        s.interactions
    );
    Ok(())
}

fn read_log(path: &Path) -> anyhow::Result<Vec<dre_rank::trainer::LogRecord>> {
    let file_path = if path.is_dir() {
        path.join("trainlog.jsonl")
    } else {
        path.to_path_buf()
    };
    let file = File::open(&file_path).with_context(|| format!("opening {}", file_path.display()))?;
    TrainLog::read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", file_path.display()))
}

fn cmd_curves(args: CurvesArgs) -> anyhow::Result<()> {
    let mut logs = Vec::new();
    for entry in &args.logs {
        let (name, path) = entry
            .split_once('=')
            .ok_or_else(|| usage_error(&format!("expected method=path, got `{entry}`")))?;
        logs.push((name.to_string(), read_log(Path::new(path))?));
    }
    let points = curves::merge(&logs)?;
    write_with(&args.out, |w| curves::write_csv(&points, w))?;
    let summary = logs
        .iter()
        .map(|(m, r)| curves::iterations_to_fraction(m, r, args.fraction))
        .collect::<dre_rank::Result<Vec<_>>>()?;
    for s in &summary {
        println!(
            "{}\titerations_to_{:.0}pct\t{}\tfinal_recall\t{:.6}",
            s.method,
            args.fraction * 100.0,
            s.iteration,
            s.final_recall
        );
    }
    if let Some(path) = &args.summary {
        write_with(path, |w| curves::write_summary_csv(&summary, w))?;
    }
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> anyhow::Result<()> {
    let ds = load_dataset(&args.data, args.format)?;
    let out = serde_json::json!({ "stats": ds.stats(), "fingerprint": ds.fingerprint() });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Curves(a) => cmd_curves(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
