//! Command-line front end.
//!
//! Every subcommand accepts `--config FILE` holding `key=value` lines named
//! after its long flags. File values are applied first, so flags given on
//! the command line win.
//!
//! Exit codes: 0 success, 2 usage, 3 IO, 4 divergence, 5 failed check.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Error;
use crate::gnn::{loss_nll, ForwardRngs, Model, ModelConfig, Readout, RunMode};
use crate::graph::{load_dataset, save_dataset, Graph, GraphBatch, LabeledExample};
use crate::metrics::{mean_std, MeanStd};
use crate::rng::{stream, substream, Stream};
use crate::sinkhorn::{estimate_rho, node_attention, soft_top_r, soft_top_r_values, Mode, RhoFit, Segments, TopRConfig};
use crate::synth::{generate_dataset, FeatMode, SynthConfig};
use crate::tensor::{grad_check, Tensor};
use crate::train::{ablation_suite, parallel_map, predict, train, MetricsReport, Task, TrainConfig, Variant, SCHEMA_VERSION};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_CHECK: i32 = 5;

#[derive(Parser, Debug)]
#[command(name = "gsina", version, about = "Soft top-r graph attention via Sinkhorn iterations")]
pub struct Cli {
    /// key=value file; command-line flags override its entries
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate biased train/val and unbiased test splits
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus metrics
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Fit geometric convergence rates of Sinkhorn residuals
    Converge(ConvergeArgs),
    /// Compare analytic and finite-difference gradients
    Gradcheck(GradcheckArgs),
    /// Dump per-graph attention and a separability histogram
    AttnDump(AttnDumpArgs),
    /// Train every ablation variant over several seeds
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FeatArg {
    Degree,
    Uniform,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Micro,
    Macro,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ReadoutArg {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Graph,
    Node,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Graph => Task::GraphLevel,
            TaskArg::Node => Task::NodeLevel,
        }
    }
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite".into())
    }
}

fn ratio(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

fn unit(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn dropout_rate(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1)"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be non-negative"))
    }
}

fn count(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(format!("{e}")),
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0.9, value_parser = unit)]
    pub bias: f64,
    #[arg(long, default_value_t = 600, value_parser = count)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200, value_parser = count)]
    pub n_val: usize,
    #[arg(long, default_value_t = 600, value_parser = count)]
    pub n_test: usize,
    #[arg(long, default_value_t = SynthConfig::default().base_size_range.0, value_parser = count)]
    pub base_min: usize,
    #[arg(long, default_value_t = SynthConfig::default().base_size_range.1, value_parser = count)]
    pub base_max: usize,
    #[arg(long, value_enum, default_value_t = FeatArg::Degree)]
    pub feat_mode: FeatArg,
    #[arg(long, default_value_t = 11, value_parser = count)]
    pub feat_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Fraction of edges selected; 1 disables selection
    #[arg(long, default_value_t = 0.4, value_parser = ratio)]
    pub r: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0, value_parser = non_negative)]
    pub sigma: f64,
    #[arg(long, default_value_t = 10, value_parser = count)]
    pub iters: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Micro)]
    pub mode: ModeArg,
    #[arg(long)]
    pub ablate_gumbel: bool,
    #[arg(long)]
    pub ablate_nodeattn: bool,
    #[arg(long, default_value_t = 32, value_parser = count)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 0.3, value_parser = dropout_rate)]
    pub dropout: f64,
    #[arg(long, value_enum, default_value_t = ReadoutArg::Sum)]
    pub readout: ReadoutArg,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 100, value_parser = count)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10, value_parser = count)]
    pub patience: usize,
    #[arg(long, default_value_t = 32, value_parser = count)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3, value_parser = non_negative)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = TaskArg::Graph)]
    pub task: TaskArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory with train.jsonl, val.jsonl and optionally test.jsonl
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON Lines dataset
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Graph)]
    pub task: TaskArg,
    #[arg(long, default_value_t = 32, value_parser = count)]
    pub batch_size: usize,
    /// Write the report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConvergeArgs {
    #[arg(long, default_value_t = 64, value_parser = count)]
    pub m: usize,
    #[arg(long, default_value_t = 0.5, value_parser = ratio)]
    pub r: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub tau: f64,
    #[arg(long, default_value_t = 100, value_parser = count)]
    pub trials: usize,
    #[arg(long, default_value_t = 20, value_parser = count)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1, value_parser = count)]
    pub jobs: usize,
    /// Per-trial CSV output
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8, value_parser = count)]
    pub m: usize,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.5, value_parser = ratio)]
    pub r: f64,
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5, value_parser = positive)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AttnDumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Graph)]
    pub task: TaskArg,
    #[arg(long, default_value = "attn")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 1, value_parser = count)]
    pub jobs: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn check(message: impl Into<String>) -> Self {
        Self { code: EXIT_CHECK, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Json(_) | Error::Format(_) => EXIT_IO,
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            Error::DegenerateTrace(_) => EXIT_CHECK,
            Error::InvalidConfig(_)
            | Error::InvalidRatio(_)
            | Error::SizeTooSmall(_)
            | Error::InvalidLabel { .. }
            | Error::MissingMask
            | Error::FeatureDimMismatch { .. }
            | Error::TooFewEdges(_)
            | Error::EmptyDataset => EXIT_USAGE,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for n in names {
        cmd = cmd.mut_subcommand(n, |s| s.args_override_self(true));
    }
    cmd
}

fn find_config(args: &[OsString]) -> CliResult<Option<PathBuf>> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return match it.next() {
                Some(p) => Ok(Some(PathBuf::from(p))),
                None => Err(Failure::usage("--config needs a file")),
            };
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Ok(Some(PathBuf::from(p)));
        }
    }
    Ok(None)
}

/// Turns `key=value` lines into flags for `sub`. `#` starts a comment.
pub fn config_to_flags(text: &str, sub: &clap::Command) -> CliResult<Vec<OsString>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("config line {}: expected key=value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key) && key != "config" && key != "help")
            .ok_or_else(|| Failure::usage(format!("config line {}: unknown key `{key}`", lineno + 1)))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value {
                "true" => out.push(OsString::from(format!("--{key}"))),
                "false" => {}
                other => {
                    return Err(Failure::usage(format!("config line {}: `{key}` expects true or false, got `{other}`", lineno + 1)))
                }
            }
        } else {
            out.push(OsString::from(format!("--{key}")));
            out.push(OsString::from(value));
        }
    }
    Ok(out)
}

fn expand_config(cmd: &clap::Command, args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some(path) = find_config(&args)? else {
        return Ok(args);
    };
    let Some(pos) = args.iter().position(|a| cmd.find_subcommand(a).is_some()) else {
        return Ok(args);
    };
    let sub = cmd.find_subcommand(&args[pos]).expect("found above");
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure { code: EXIT_IO, message: format!("{}: {e}", path.display()) })?;
    let flags = config_to_flags(&text, sub)?;
    let mut out: Vec<OsString> = args[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let cmd = command();
    let parsed = expand_config(&cmd, args).and_then(|args| {
        let matches = cmd.try_get_matches_from(args).map_err(|e| {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            Failure { code, message: e.render().to_string() }
        })?;
        Cli::from_arg_matches(&matches).map_err(|e| Failure::usage(e.to_string()))
    });
    let result = parsed.and_then(|cli| dispatch(cli.command));
    match result {
        Ok(()) => 0,
        Err(f) => {
            if f.code == 0 {
                print!("{}", f.message);
            } else {
                eprintln!("error: {}", f.message.trim_end());
            }
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Converge(a) => cmd_converge(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::AttnDump(a) => cmd_attn_dump(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> CliResult<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?);
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct DatasetMetadata<'a> {
    schema_version: u32,
    config: &'a SynthConfig,
    train: usize,
    val: usize,
    test: usize,
}

pub fn cmd_gen_data(a: &GenDataArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        bias: a.bias,
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        base_size_range: (a.base_min, a.base_max),
        feat_mode: match a.feat_mode {
            FeatArg::Degree => FeatMode::DegreeOneHot,
            FeatArg::Uniform => FeatMode::UniformRandom,
        },
        feat_dim: a.feat_dim,
        seed: a.seed,
    };
    let splits = generate_dataset(&cfg)?;
    fs::create_dir_all(&a.out)?;
    save_dataset(&a.out.join("train.jsonl"), &splits.train)?;
    save_dataset(&a.out.join("val.jsonl"), &splits.val)?;
    save_dataset(&a.out.join("test.jsonl"), &splits.test)?;
    let meta = DatasetMetadata {
        schema_version: SCHEMA_VERSION,
        config: &cfg,
        train: splits.train.len(),
        val: splits.val.len(),
        test: splits.test.len(),
    };
    write_json(&a.out.join("metadata.json"), &meta)?;
    println!(
        "wrote {} train, {} val, {} test examples to {}",
        meta.train,
        meta.val,
        meta.test,
        a.out.display()
    );
    Ok(())
}

struct Splits {
    train: Vec<LabeledExample>,
    val: Vec<LabeledExample>,
    test: Option<Vec<LabeledExample>>,
}

fn load_splits(dir: &Path) -> CliResult<Splits> {
    let load = |name: &str| {
        let p = dir.join(name);
        load_dataset(&p).map_err(|e| Failure { code: Failure::from(e).code, message: format!("{}: cannot load", p.display()) })
    };
    let test_path = dir.join("test.jsonl");
    Ok(Splits {
        train: load("train.jsonl")?,
        val: load("val.jsonl")?,
        test: if test_path.exists() { Some(load("test.jsonl")?) } else { None },
    })
}

fn num_classes(data: &[LabeledExample], task: Task) -> usize {
    let max = match task {
        Task::GraphLevel => data.iter().map(|e| e.label).max(),
        Task::NodeLevel => data.iter().filter_map(|e| e.node_labels.as_ref()).flatten().copied().max(),
    };
    max.map_or(2, |m| (m + 1).max(2))
}

fn train_config(model: &ModelArgs, optim: &OptimArgs, seed: u64, splits: &Splits) -> CliResult<TrainConfig> {
    let task: Task = optim.task.into();
    let first = splits.train.first().ok_or(Error::EmptyDataset)?;
    let all: Vec<LabeledExample> = splits.train.iter().chain(&splits.val).cloned().collect();
    let cfg = TrainConfig {
        epochs: optim.epochs,
        batch_size: optim.batch_size,
        learning_rate: optim.lr,
        patience: optim.patience,
        seed,
        task,
        model: ModelConfig {
            in_dim: first.graph.feat_dim(),
            hidden_dim: model.hidden,
            num_layers: model.layers,
            num_classes: num_classes(&all, task),
            dropout: model.dropout,
            readout: match model.readout {
                ReadoutArg::Sum => Readout::Sum,
                ReadoutArg::Mean => Readout::Mean,
            },
            topr: TopRConfig {
                r: model.r,
                tau: model.tau,
                sigma: model.sigma,
                n_iters: model.iters,
                mode: match model.mode {
                    ModeArg::Micro => Mode::Micro,
                    ModeArg::Macro => Mode::Macro,
                },
            },
            ablate_gumbel: model.ablate_gumbel,
            ablate_node_attn: model.ablate_nodeattn,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let splits = load_splits(&a.data)?;
    let cfg = train_config(&a.model, &a.optim, a.seed, &splits)?;
    if cfg.model.topr.is_degenerate() {
        eprintln!("ERM-degenerate mode: r = 1 keeps every edge at attention 1");
    }
    let (model, history) = train(&splits.train, &splits.val, &cfg)?;
    let test = match &splits.test {
        Some(t) => Some(predict(&model, t, cfg.task, cfg.batch_size)?.metrics()),
        None => None,
    };
    fs::create_dir_all(&a.out)?;
    model.save(&a.out.join("model.ckpt"))?;
    write_json(&a.out.join("history.json"), &history)?;
    let report = MetricsReport::new(cfg.seed, &history, test);
    write_json(&a.out.join("metrics.json"), &report)?;
    println!("best validation accuracy: {:.4} (epoch {})", history.best_val_accuracy, history.best_epoch);
    if let Some(t) = &report.test {
        println!("test accuracy: {:.4}", t.accuracy);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    schema_version: u32,
    num_examples: usize,
    #[serde(flatten)]
    metrics: crate::train::EvalMetrics,
}

fn load_model(path: &Path) -> CliResult<Model> {
    Model::load(path).map_err(|e| match e {
        Error::Io(io) => Failure { code: EXIT_IO, message: format!("{}: {io}", path.display()) },
        other => other.into(),
    })
}

fn load_data(path: &Path) -> CliResult<Vec<LabeledExample>> {
    load_dataset(path).map_err(|e| match e {
        Error::Io(io) => Failure { code: EXIT_IO, message: format!("{}: {io}", path.display()) },
        other => other.into(),
    })
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let metrics = predict(&model, &data, a.task.into(), a.batch_size)?.metrics();
    let report = EvalReport { schema_version: SCHEMA_VERSION, num_examples: data.len(), metrics };
    emit_json(a.out.as_deref(), &report)
}

#[derive(Serialize)]
struct Quantiles {
    min: f64,
    q25: f64,
    median: f64,
    q75: f64,
    max: f64,
}

fn quantiles(xs: &[f64]) -> Quantiles {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Quantiles { min: v[0], q25: at(0.25), median: at(0.5), q75: at(0.75), max: v[v.len() - 1] }
}

#[derive(Serialize)]
struct ConvergeSummary {
    schema_version: u32,
    trials: usize,
    m: usize,
    r: f64,
    tau: f64,
    iters: usize,
    rho: Quantiles,
    r2: Quantiles,
    all_contracting: bool,
}

/// Residual trace of one random instance with `N(0,1)` scores.
pub fn convergence_trial(m: usize, r: f64, tau: f64, iters: usize, seed: u64, trial: u64) -> crate::Result<Vec<f64>> {
    let mut rng = substream(seed, Stream::Trials, trial);
    let scores: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let cfg = TopRConfig { r, tau, sigma: 0.0, n_iters: iters, mode: Mode::Macro };
    let (_, traces) = soft_top_r_values(&scores, &Segments::single(m), &cfg, &mut rng)?;
    traces
        .into_iter()
        .next()
        .map(|t| t.residuals)
        .ok_or_else(|| Error::DegenerateTrace("r = 1 runs no iterations".into()))
}

pub fn cmd_converge(a: &ConvergeArgs) -> CliResult<()> {
    let trials: Vec<u64> = (0..a.trials as u64).collect();
    let fits: Vec<(RhoFit, Vec<f64>)> = parallel_map(&trials, a.jobs, |t| {
        let residuals = convergence_trial(a.m, a.r, a.tau, a.iters, a.seed, t)?;
        // the first iteration is transient
        let fit = estimate_rho(residuals.get(1..).unwrap_or(&[]))?;
        Ok((fit, residuals))
    })?;
    if let Some(path) = &a.out {
        let mut csv = String::from("trial,rho,r2,residuals\n");
        for (t, (fit, res)) in fits.iter().enumerate() {
            let trace: Vec<String> = res.iter().map(|x| format!("{x:e}")).collect();
            csv.push_str(&format!("{t},{},{},{}\n", fit.rho, fit.r2, trace.join(" ")));
        }
        fs::write(path, csv)?;
    }
    let rhos: Vec<f64> = fits.iter().map(|(f, _)| f.rho).collect();
    let r2s: Vec<f64> = fits.iter().map(|(f, _)| f.r2).collect();
    let summary = ConvergeSummary {
        schema_version: SCHEMA_VERSION,
        trials: a.trials,
        m: a.m,
        r: a.r,
        tau: a.tau,
        iters: a.iters,
        rho: quantiles(&rhos),
        r2: quantiles(&r2s),
        all_contracting: fits.iter().all(|(f, _)| f.contracting),
    };
    emit_json(None, &summary)
}

/// Two small graphs with random features for end-to-end checks.
pub fn toy_batch(seed: u64, feat_dim: usize) -> crate::Result<GraphBatch> {
    let mut rng = stream(seed, Stream::Data);
    let mut make = |n: usize, edges: &[(usize, usize)], label: usize| -> crate::Result<LabeledExample> {
        let feats = (0..n * feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(LabeledExample::new(Graph::new(n, edges, Tensor::matrix(n, feat_dim, feats)?)?, label))
    };
    let a = make(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)], 0)?;
    let b = make(4, &[(0, 1), (1, 2), (2, 3)], 1)?;
    GraphBatch::new(&[&a, &b])
}

#[derive(Serialize)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Finite-difference checks of soft top-r and of the end-to-end loss with
/// respect to every parameter tensor.
pub fn gradient_checks(m: usize, r: f64, tau: f64, tol: f64, h: f64, seed: u64) -> crate::Result<Vec<CheckLine>> {
    let mut rng = stream(seed, Stream::Trials);
    let scores: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let weights: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let topr = TopRConfig { r, tau, sigma: 0.0, n_iters: 10, mode: Mode::Macro };
    let mut lines = Vec::new();

    let w = Tensor::matrix(m, 1, weights)?;
    let report = grad_check(
        |tape, x| {
            let mut unused = stream(0, Stream::Gumbel);
            let out = soft_top_r(tape, x, &Segments::single(m), &topr, &mut unused)?;
            let wv = tape.constant(w.clone());
            let prod = tape.mul(out.alpha, wv)?;
            tape.sum(prod, None)
        },
        &Tensor::matrix(m, 1, scores)?,
        h,
        tol,
    )?;
    lines.push(CheckLine { name: "soft_top_r".into(), max_rel_error: report.max_rel_error, passed: report.passed });

    let cfg = ModelConfig {
        in_dim: 3,
        hidden_dim: 4,
        num_layers: 2,
        num_classes: 2,
        dropout: 0.0,
        topr: TopRConfig { r, tau, ..topr },
        ..Default::default()
    };
    let model = Model::new(cfg, seed)?;
    let batch = toy_batch(seed, 3)?;
    let mode = RunMode { gumbel: false, dropout: false, batch_stats: true };
    for (name, value) in model.params.iter() {
        let report = grad_check(
            |tape, x| {
                let p = model.params.bind(tape).with(name, x);
                let mut rngs = ForwardRngs::from_seed(0);
                let out = model.forward_graph(tape, &p, &batch, mode, &mut rngs)?;
                loss_nll(tape, out.logits, &batch.labels)
            },
            value,
            h,
            tol,
        )?;
        lines.push(CheckLine { name: format!("loss/{name}"), max_rel_error: report.max_rel_error, passed: report.passed });
    }
    Ok(lines)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let lines = gradient_checks(a.m, a.r, a.tau, a.tol, a.step, a.seed)?;
    for l in &lines {
        println!("{:<28} max_rel_error {:.3e}  {}", l.name, l.max_rel_error, if l.passed { "PASS" } else { "FAIL" });
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    if failed > 0 {
        return Err(Failure::check(format!("{failed} gradient check(s) above tolerance {:e}", a.tol)));
    }
    Ok(())
}

#[derive(Serialize)]
struct GraphAttention {
    index: usize,
    edges: Vec<(usize, usize)>,
    edge_attn: Vec<f64>,
    node_attn: Vec<f64>,
    trace: Vec<f64>,
    gt_edge_mask: Option<Vec<bool>>,
}

pub fn cmd_attn_dump(a: &AttnDumpArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let preds = predict(&model, &data, a.task.into(), 32)?;
    let dump = data
        .iter()
        .zip(preds.alpha_e.iter().zip(&preds.traces))
        .enumerate()
        .map(|(i, (ex, (alpha, trace)))| {
            Ok(GraphAttention {
                index: i,
                edges: ex.graph.edges().to_vec(),
                node_attn: if model.config.ablate_node_attn || model.config.topr.is_degenerate() {
                    vec![1.0; ex.graph.num_nodes()]
                } else {
                    node_attention(&ex.graph, alpha)?
                },
                edge_attn: alpha.clone(),
                trace: trace.clone(),
                gt_edge_mask: ex.gt_edge_mask.clone(),
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let sep = preds.separability()?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("attention.json"), &dump)?;
    fs::write(a.out.join("histogram.csv"), sep.to_csv())?;
    println!("overlap: {:.4}", sep.overlap);
    Ok(())
}

#[derive(Serialize)]
struct AblationSummaryRow<'a> {
    variant: &'a str,
    accuracy: MeanStd,
}

pub fn cmd_ablate(a: &AblateArgs) -> CliResult<()> {
    let splits = load_splits(&a.data)?;
    let test = splits.test.as_ref().ok_or_else(|| Failure::usage("ablation needs test.jsonl"))?;
    let cfg = train_config(&a.model, &a.optim, 0, &splits)?;
    let table = ablation_suite(&cfg, &Variant::ALL, &a.seeds, (&splits.train, &splits.val, test), a.jobs)?;
    for row in &table.rows {
        let s = AblationSummaryRow { variant: &row.name, accuracy: mean_std(&row.accuracies) };
        eprintln!("{:<14} {:.4} ± {:.4}", s.variant, s.accuracy.mean, s.accuracy.std);
    }
    emit_json(a.out.as_deref(), &table)
}
