//! Command-line surface: corpus synthesis, training, evaluation, attention
//! inspection and the subsampling sweep.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_corpus, write_corpus, Corpus, CorpusError, Regime, SlotId, Tokenizer};
use crate::evaluation::{
    dump_attention, evaluate, write_attention_jsonl, write_attention_tsv, EvalError, EvalOptions, EvalReport,
};
use crate::model::{precision_name, DstModel, ModelConfig, ModelError, Variant};
use crate::synth::{default_schema, generate_corpus, GenConfig, Schema, SynthError};
use crate::training::{seed_average, MeanStd, RunMetrics, StderrProgress, TrainConfig, TrainError, TrainedRun};

mod sweep;

pub use sweep::{sweep, sweep_with, write_tsv as write_sweep_tsv, SweepOptions, SweepRow};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    /// 1 for divergence, 2 for usage and input problems.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Train(TrainError::Divergence { .. }) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn load(path: &Path) -> Result<Corpus> {
    if !path.exists() {
        return Err(CliError::Io {
            path: path.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotFound, "no such file"),
        });
    }
    Ok(load_corpus(path, Tokenizer::default())?)
}

fn load_checkpoint(path: &Path) -> Result<DstModel> {
    if !path.exists() {
        return Err(CliError::Io {
            path: path.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotFound, "no such file"),
        });
    }
    Ok(DstModel::load(path)?)
}

#[derive(Debug, Parser)]
#[command(name = "agg-dst", version, about = "Dialogue state tracking with full or sparse supervision")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Train one model per seed and write checkpoints plus metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus; prints the report as JSON.
    Eval(EvalArgs),
    /// Print initialization attention over the history of one turn.
    Attn(AttnArgs),
    /// Full supervision at several subsampling rates plus weak references.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Schema JSON; the built-in schema when omitted.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Generator config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Dev corpus for early stopping.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Test corpus scored by every seed's best model.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// JSON with optional "model" and "train" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Keep only dialogues tagged with this domain.
    #[arg(long)]
    pub domain: Option<String>,
    /// Compare only slots of services active in the gold state.
    #[arg(long)]
    pub active_only: bool,
    /// Include per-turn predictions in the report.
    #[arg(long)]
    pub predictions: bool,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttnFormat {
    Jsonl,
    Tsv,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub dialogue: String,
    /// 1-based turn; the last turn when omitted.
    #[arg(long)]
    pub turn: Option<usize>,
    /// Comma-separated `domain-slot` names; the whole catalog when omitted.
    #[arg(long, value_delimiter = ',')]
    pub slots: Option<Vec<String>>,
    #[arg(long, value_enum, default_value = "tsv")]
    pub format: AttnFormat,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Corpus the sweep points are scored on; the dev corpus when omitted.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
    pub rates: Vec<f64>,
    /// Variants trained with full supervision at every rate.
    #[arg(long, value_delimiter = ',', default_value = "trade,agg")]
    pub variants: Vec<Variant>,
    /// Variants trained under the weak regime at rate 1.0.
    #[arg(long, value_delimiter = ',', default_value = "trade,agg")]
    pub weak_variants: Vec<Variant>,
    /// Regime of the reference runs at rate 1.0.
    #[arg(long, default_value = "weak-final")]
    pub weak_regime: Regime,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

/// Model and training settings as one JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub precision: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub started: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished: Option<String>,
}

pub fn version_string() -> String {
    match option_env!("AGG_DST_GIT_DESCRIBE") {
        Some(v) => v.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

impl RunManifest {
    fn new(command: &str, config: Option<serde_json::Value>, seeds: Vec<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: version_string(),
            precision: precision_name().to_string(),
            config,
            seeds,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: now(),
            finished: None,
        }
    }

    fn input(mut self, name: &str, path: Option<&Path>) -> Self {
        if let Some(p) = path {
            self.inputs.insert(name.to_string(), absolute(p));
        }
        self
    }

    fn output(mut self, name: &str, path: &Path) -> Self {
        self.outputs.insert(name.to_string(), absolute(path));
        self
    }
}

fn check_precision(p: Option<Precision>) -> Result<()> {
    let want = match p {
        None => return Ok(()),
        Some(Precision::F32) => "f32",
        Some(Precision::F64) => "f64",
    };
    if want != precision_name() {
        return Err(CliError::Usage(format!(
            "this binary computes in {}; rebuild {} the `f32` feature for {want}",
            precision_name(),
            if want == "f32" { "with" } else { "without" }
        )));
    }
    Ok(())
}

/// Parallel job cap from `AGG_DST_THREADS`, at least 1.
pub fn thread_cap() -> usize {
    std::env::var("AGG_DST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.is_file() {
        return Err(CliError::Usage(format!("{} is a file", dir.display())));
    }
    let occupied = dir.is_dir() && fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
    if occupied && !force {
        return Err(CliError::Usage(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Runs `jobs` on up to `threads` workers and returns results in job order.
pub(crate) fn run_jobs<T: Send, F: Fn(usize) -> T + Sync>(n: usize, threads: usize, job: F) -> Vec<T> {
    if threads <= 1 || n <= 1 {
        return (0..n).map(job).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let done: Vec<Vec<(usize, T)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads.min(n))
            .map(|_| {
                scope.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        if i >= n {
                            break out;
                        }
                        out.push((i, job(i)));
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for (i, t) in done.into_iter().flatten() {
        slots[i] = Some(t);
    }
    slots.into_iter().map(|s| s.expect("every job ran")).collect()
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if args.out.exists() && !args.force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            args.out.display()
        )));
    }
    let schema: Schema = match &args.schema {
        Some(p) => read_json(p)?,
        None => default_schema(),
    };
    let mut cfg: GenConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    if let Some(n) = args.n {
        cfg.n_dialogues = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let manifest_path = manifest_beside(&args.out);
    let manifest = RunManifest::new("synth", Some(serde_json::to_value(&cfg).expect("serializable")), vec![cfg.seed])
        .input("schema", args.schema.as_deref())
        .output("corpus", &args.out);
    write_json(&manifest_path, &manifest)?;
    let corpus = generate_corpus(&schema, &cfg)?;
    let file = fs::File::create(&args.out).map_err(io_err(&args.out))?;
    let mut w = io::BufWriter::new(file);
    write_corpus(&corpus, &mut w)?;
    w.flush().map_err(io_err(&args.out))?;
    write_json(
        &manifest_path,
        &RunManifest {
            finished: Some(now()),
            ..manifest
        },
    )
}

fn manifest_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub metrics: RunMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub regime: Regime,
    pub variant: Variant,
    pub examples: usize,
    pub dialogues: usize,
    pub seeds: Vec<SeedResult>,
    /// Seed-averaged test metrics, or best dev metrics without a test corpus.
    pub average: BTreeMap<String, MeanStd>,
}

/// Dev metrics of the selected epoch, as a flat map.
fn dev_summary(m: &RunMetrics) -> BTreeMap<String, f64> {
    let best = m
        .best_epoch
        .and_then(|e| m.epochs.get(e - 1))
        .and_then(|e| e.dev.as_ref());
    let mut out = BTreeMap::new();
    if let Some(d) = best {
        out.insert("dev.joint_goal_accuracy".into(), d.joint_goal_accuracy);
        out.insert("dev.slot_accuracy".into(), d.slot_accuracy);
    }
    if let Some(s) = m.mean_epoch_seconds() {
        out.insert("epoch_seconds".into(), s);
    }
    out.insert("total_seconds".into(), m.total_seconds);
    out
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport> {
    check_precision(args.precision)?;
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(r) = args.regime {
        cfg.train.regime = r;
    }
    if let Some(s) = &args.seeds {
        cfg.train.seeds = s.clone();
    }
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let train = load(&args.corpus)?;
    let dev = args.dev.as_deref().map(load).transpose()?;
    let test = args.test.as_deref().map(load).transpose()?;

    prepare_dir(&args.out, args.force)?;
    let manifest_path = args.out.join("manifest.json");
    let manifest = RunManifest::new(
        "train",
        Some(serde_json::to_value(&cfg).expect("serializable")),
        cfg.train.seeds.clone(),
    )
    .input("corpus", Some(&args.corpus))
    .input("dev", args.dev.as_deref())
    .input("test", args.test.as_deref())
    .input("config", args.config.as_deref())
    .output("dir", &args.out);
    write_json(&manifest_path, &manifest)?;

    let examples = crate::training::build_examples(&train, &crate::training::supervise(&train, cfg.train.regime)?);
    eprintln!(
        "regime {}: {} training examples from {} dialogues",
        cfg.train.regime,
        examples.len(),
        train.dialogues.len()
    );
    let seeds = cfg.train.seeds.clone();
    let runs: Vec<crate::training::Result<TrainedRun>> = run_jobs(seeds.len(), thread_cap(), |i| {
        crate::training::train_seed(&train, dev.as_ref(), &cfg.model, &cfg.train, seeds[i], &mut StderrProgress)
    });
    let mut results = Vec::new();
    for (seed, run) in seeds.iter().zip(runs) {
        let run = run?;
        let dir = args.out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let checkpoint = dir.join("checkpoint.json");
        run.model.save(&checkpoint)?;
        write_json(&dir.join("metrics.json"), &run.metrics)?;
        let test_report = match &test {
            Some(t) => Some(evaluate(&run.model, t, &EvalOptions::default())?),
            None => None,
        };
        results.push(SeedResult {
            seed: *seed,
            checkpoint: absolute(&checkpoint),
            metrics: run.metrics,
            test: test_report,
        });
    }
    let maps: Vec<BTreeMap<String, f64>> = results
        .iter()
        .map(|r| match &r.test {
            Some(t) => t.metric_map(),
            None => dev_summary(&r.metrics),
        })
        .collect();
    let report = TrainReport {
        regime: cfg.train.regime,
        variant: cfg.model.variant,
        examples: examples.len(),
        dialogues: train.dialogues.len(),
        average: seed_average(&maps)?,
        seeds: results,
    };
    write_json(&args.out.join("report.json"), &report)?;
    write_json(
        &manifest_path,
        &RunManifest {
            finished: Some(now()),
            ..manifest
        },
    )?;
    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    check_precision(args.precision)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let corpus = load(&args.corpus)?;
    Ok(evaluate(
        &model,
        &corpus,
        &EvalOptions {
            domain: args.domain.clone(),
            active_only: args.active_only,
            threads: thread_cap(),
            keep_predictions: args.predictions,
        },
    )?)
}

pub fn cmd_attn<W: Write>(args: &AttnArgs, out: W) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let corpus = load(&args.corpus)?;
    let d = corpus
        .dialogues
        .iter()
        .find(|d| d.id == args.dialogue)
        .ok_or_else(|| CliError::Usage(format!("no dialogue {:?} in the corpus", args.dialogue)))?;
    let turn = args.turn.unwrap_or(d.num_turns());
    if turn == 0 || turn > d.num_turns() {
        return Err(CliError::Usage(format!("turn {turn} outside 1..={}", d.num_turns())));
    }
    let slots: Vec<SlotId> = match &args.slots {
        Some(names) => names
            .iter()
            .map(|n| n.parse().map_err(CliError::Usage))
            .collect::<Result<_>>()?,
        None => model.catalog().slots().to_vec(),
    };
    let dumps = dump_attention(&model, d, turn, &slots)?;
    match args.format {
        AttnFormat::Jsonl => write_attention_jsonl(&dumps, out)?,
        AttnFormat::Tsv => write_attention_tsv(&dumps, out)?,
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<SweepRow>> {
    check_precision(args.precision)?;
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = &args.seeds {
        cfg.train.seeds = s.clone();
    }
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let opts = SweepOptions {
        rates: args.rates.clone(),
        variants: args.variants.clone(),
        weak_variants: args.weak_variants.clone(),
        weak_regime: args.weak_regime,
    };
    opts.validate()?;
    let train = load(&args.corpus)?;
    let dev = args.dev.as_deref().map(load).transpose()?;
    let test = args.test.as_deref().map(load).transpose()?;
    let scored_on = test
        .as_ref()
        .or(dev.as_ref())
        .ok_or_else(|| CliError::Usage("sweep needs --test or --dev to score on".into()))?;

    prepare_dir(&args.out, args.force)?;
    let manifest_path = args.out.join("manifest.json");
    let manifest = RunManifest::new(
        "sweep",
        Some(serde_json::json!({ "run": cfg, "sweep": opts })),
        cfg.train.seeds.clone(),
    )
    .input("corpus", Some(&args.corpus))
    .input("dev", args.dev.as_deref())
    .input("test", args.test.as_deref())
    .input("config", args.config.as_deref())
    .output("dir", &args.out);
    write_json(&manifest_path, &manifest)?;

    let rows = sweep(&train, dev.as_ref(), scored_on, &cfg.model, &cfg.train, &opts, thread_cap())?;
    write_json(&args.out.join("sweep.json"), &rows)?;
    let tsv_path = args.out.join("sweep.tsv");
    let mut tsv = Vec::new();
    sweep::write_tsv(&rows, &mut tsv).map_err(io_err(&tsv_path))?;
    fs::write(&tsv_path, tsv).map_err(io_err(&tsv_path))?;
    write_json(
        &manifest_path,
        &RunManifest {
            finished: Some(now()),
            ..manifest
        },
    )?;
    Ok(rows)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    serde_json::to_writer_pretty(&mut lock, value).expect("serializable");
    writeln!(lock).map_err(io_err(Path::new("<stdout>")))
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => print_json(&cmd_train(&a)?.average),
        Command::Eval(a) => print_json(&cmd_eval(&a)?),
        Command::Attn(a) => {
            let stdout = io::stdout();
            cmd_attn(&a, stdout.lock())
        }
        Command::Sweep(a) => {
            let rows = cmd_sweep(&a)?;
            let stdout = io::stdout();
            sweep::write_tsv(&rows, stdout.lock()).map_err(io_err(Path::new("<stdout>")))
        }
    }
}

/// Entry point for the binary: parses arguments, runs, maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
