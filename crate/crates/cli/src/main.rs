//! `mhelab`: parameter and memory accounting, metric recomputation,
//! desk-scale training/evaluation and gradient checks for the attention
//! variants.

mod commands;
mod config;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mhelab_core::accounting::Convention;
use mhelab_core::model::Arch;
use mhelab_core::optim::Schedule;
use mhelab_core::train::Objective;
use mhelab_core::AttentionVariant;

use output::Format;

#[derive(Parser, Debug)]
#[command(name = "mhelab", version, about = "Attention parameter-efficiency laboratory")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Arithmetic precision for training and evaluation.
    #[arg(long, global = true, value_enum, default_value_t = Precision::Fp32)]
    pub precision: Precision,
    /// Write the report here instead of standard output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Output format [default: csv for sweep, table otherwise].
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// key=value file of defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    Fp32,
    Fp64,
}

/// Comma-separated variant tags, or `all`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantList(pub Vec<AttentionVariant>);

fn parse_variants(s: &str) -> Result<VariantList, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part.eq_ignore_ascii_case("all") {
            out.extend(AttentionVariant::ALL);
        } else {
            out.push(part.parse::<AttentionVariant>().map_err(|e| e.to_string())?);
        }
    }
    Ok(VariantList(out))
}

pub fn flatten(lists: &[VariantList]) -> Vec<AttentionVariant> {
    if lists.is_empty() {
        return AttentionVariant::ALL.to_vec();
    }
    let mut out: Vec<AttentionVariant> = Vec::new();
    for v in lists.iter().flat_map(|l| l.0.iter().copied()) {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse()
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Attention parameter counts per sublayer and per model.
    #[command(args_override_self = true)]
    Params(ParamsArgs),
    /// Mixed-precision training memory per attention block.
    #[command(args_override_self = true)]
    Memory(MemoryArgs),
    /// Parameter and memory budgets over a range of heads or a layer×head grid.
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
    /// Train a small transformer and write a checkpoint.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Strided perplexity of a checkpoint on a text.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Recompute PRR and PEoP from a table of published scores.
    #[command(args_override_self = true)]
    Metrics(MetricsArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Params(_) => "params",
            Command::Memory(_) => "memory",
            Command::Sweep(_) => "sweep",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::Metrics(_) => "metrics",
        }
    }
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// Variant tags (sha, mha, el-att, mqa, skv, mhe-add, mhe-mul) or `all`.
    #[arg(value_parser = parse_variants)]
    pub variants: Vec<VariantList>,
    /// Layers (encoder layers when --decoder-layers is given).
    #[arg(long, default_value_t = 12)]
    pub layers: u64,
    #[arg(long, default_value_t = 12)]
    pub heads: u64,
    #[arg(long, default_value_t = 64)]
    pub head_dim: u64,
    /// table4: query/key/value only; experiment: plus the output projection.
    #[arg(long, default_value = "experiment")]
    pub convention: Convention,
    /// Decoder layers of an encoder-decoder model.
    #[arg(long)]
    pub decoder_layers: Option<u64>,
    /// Leave decoder cross-attention out of the encoder-decoder count.
    #[arg(long)]
    pub no_cross_attention: bool,
}

#[derive(Args, Debug)]
pub struct MemoryArgs {
    /// Variant tags or `all`.
    #[arg(value_parser = parse_variants)]
    pub variants: Vec<VariantList>,
    #[arg(long, default_value_t = 32)]
    pub batch: u64,
    #[arg(long, default_value_t = 512)]
    pub seq: u64,
    #[arg(long, default_value_t = 12)]
    pub heads: u64,
    #[arg(long, default_value_t = 64)]
    pub head_dim: u64,
    /// Hidden width for the activation term [default: heads × head-dim].
    #[arg(long)]
    pub dm: Option<u64>,
    /// Use this parameter count instead of a variant's block size.
    #[arg(long)]
    pub params: Option<u64>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("shape").required(true).args(["heads_range", "grid"]))]
pub struct SweepArgs {
    /// Variant tags or `all`.
    #[arg(long, value_parser = parse_variants)]
    pub variants: Vec<VariantList>,
    /// Head counts `a:b[:step]`, inclusive.
    #[arg(long)]
    pub heads_range: Option<String>,
    /// Layer×head grid such as `12,24,48x32,64`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Layers for --heads-range.
    #[arg(long, default_value_t = 1)]
    pub layers: u64,
    #[arg(long, default_value_t = 64)]
    pub head_dim: u64,
    #[arg(long, default_value_t = 32)]
    pub batch: u64,
    #[arg(long, default_value_t = 512)]
    pub seq: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value = "mhe-mul")]
    pub variant: AttentionVariant,
    /// `copy` or `bytes:<file>`.
    #[arg(long, default_value = "copy")]
    pub task: String,
    #[arg(long, value_parser = parse_arch, default_value = "decoder-only")]
    pub arch: Arch,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub head_dim: usize,
    /// Feed-forward width [default: 4 × model width].
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Copy-task vocabulary, including the reserved mask id.
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    /// Copy-task prefix length.
    #[arg(long, default_value_t = 16)]
    pub prefix_len: usize,
    /// Tokens per training sequence for byte tasks.
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, default_value = "linear")]
    pub schedule: Schedule,
    /// [default: clm for decoder-only, mlm for encoder-only]
    #[arg(long)]
    pub objective: Option<Objective>,
    #[arg(long, default_value_t = 0.15)]
    pub mask_prob: f64,
    /// Checkpoint path [default: mhelab-<variant>.ckpt].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the per-step loss curve as CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["text", "tokens"]))]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Raw text, tokenized as bytes.
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Whitespace-separated token ids.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub stride: usize,
    /// Window length [default: the model's maximum sequence length].
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Variant tags or `all`.
    #[arg(value_parser = parse_variants)]
    pub variants: Vec<VariantList>,
    #[arg(long, value_parser = parse_arch, default_value = "decoder-only")]
    pub arch: Arch,
    /// Extra check on this many randomly chosen scalars per variant.
    #[arg(long, default_value_t = 20)]
    pub sampled: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub rtol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub atol: f64,
    /// Flip the sign of one backward rule (test fixture).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// CSV with benchmark,model,score,indicator_kind[,layout,published_prr,published_peop]
    /// [default: the bundled published scores].
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Accept a PRR cell when some rounding of its inputs reproduces it.
    #[arg(long)]
    pub accept_rounding: bool,
}

/// Failure classes, mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// A check ran and found values outside tolerance.
    ChecksFailed(String),
    /// Bad flags or inputs.
    Usage(String),
    /// I/O, data or numerical failure.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::ChecksFailed(m) | CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn parse_args(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let first = Cli::try_parse_from(&argv)?;
    let Some(path) = first.global.config.clone() else {
        return Ok(first);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| {
        clap::Error::raw(clap::error::ErrorKind::Io, format!("cannot read config {}: {e}\n", path.display()))
    })?;
    let extra = config::to_args(&text)
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{}: {e}\n", path.display())))?;
    let sub = first.command.name();
    let at = argv
        .iter()
        .position(|a| a.to_str() == Some(sub))
        .expect("subcommand present in argv");
    let mut merged: Vec<OsString> = argv[..=at].to_vec();
    merged.extend(extra.into_iter().map(OsString::from));
    merged.extend(argv[at + 1..].iter().cloned());
    Cli::try_parse_from(merged)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MHELAB_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("MHELAB_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match parse_args(std::env::args_os().collect()) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mhelab {}: {}", cli.command.name(), e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
