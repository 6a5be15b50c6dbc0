//! `ripple`: oracle checks, gradient checks, scaling benchmarks, weight
//! inspection and the toy training demo.
//!
//! Exit codes: 0 success, 1 a check or criterion failed, 2 usage error.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ripple_core::RippleError;

#[global_allocator]
static ALLOC: ripple_core::alloc::CountingAllocator = ripple_core::alloc::CountingAllocator;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<RippleError> for CliError {
    fn from(e: RippleError) -> Self {
        match e {
            RippleError::Argument(m) => CliError::Usage(m),
            RippleError::Io(io) => CliError::Io(io),
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ripple", version, about = "Ripple attention over 2D token grids")]
struct Cli {
    /// Master seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Precision inputs are rounded to (f32 or f64).
    #[arg(long, global = true)]
    dtype: Option<String>,
    /// INI file with [global] and per-command sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for run outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare DP ripple attention against the enumerating oracle.
    Check(CheckArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Time attention variants across grid sizes and fit scaling slopes.
    Bench(BenchArgs),
    /// Print the spatial weights of one query.
    Weights(WeightsArgs),
    /// Train the toy classifier on a synthetic task.
    Train(TrainArgs),
}

fn push<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, v.to_string()));
    }
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Grid sizes, e.g. 4x4,6x6.
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    schemes: Option<String>,
    /// Head counts to try, e.g. 1,4.
    #[arg(long)]
    heads: Option<String>,
    /// Random instances per (size, scheme, heads).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    partition: Option<String>,
    #[arg(long)]
    r_max: Option<usize>,
    /// Allow grids above the 16x16 guardrail.
    #[arg(long)]
    force: bool,
    #[arg(long, hide = true)]
    sabotage: Option<String>,
}

impl CheckArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        push(&mut v, "sizes", &self.sizes);
        push(&mut v, "schemes", &self.schemes);
        push(&mut v, "heads", &self.heads);
        push(&mut v, "trials", &self.trials);
        push(&mut v, "tolerance", &self.tolerance);
        push(&mut v, "partition", &self.partition);
        push(&mut v, "r_max", &self.r_max);
        push(&mut v, "force", &self.force.then_some(true));
        push(&mut v, "sabotage", &self.sabotage);
        v
    }
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// featmap, weights, attention or model.
    #[arg(long)]
    scope: Option<String>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
}

impl GradcheckArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        push(&mut v, "scope", &self.scope);
        push(&mut v, "tolerance", &self.tolerance);
        push(&mut v, "step", &self.step);
        v
    }
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated: softmax, linearized, naive, dp, dyadic, dp-backward.
    #[arg(long)]
    variants: Option<String>,
    /// Token counts (perfect squares), e.g. 64,144,256,576.
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// R_max policy for the non-naive ripple variants (fixed:N, linear, dyadic).
    #[arg(long)]
    r_max: Option<String>,
    /// Use the multi-threaded attention path inside timed regions.
    #[arg(long)]
    parallel: bool,
}

impl BenchArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        push(&mut v, "variants", &self.variants);
        push(&mut v, "sizes", &self.sizes);
        push(&mut v, "repetitions", &self.repetitions);
        push(&mut v, "warmup", &self.warmup);
        push(&mut v, "batch", &self.batch);
        push(&mut v, "channels", &self.channels);
        push(&mut v, "r_max", &self.r_max);
        push(&mut v, "parallel", &self.parallel.then_some(true));
        v
    }
}

#[derive(Args, Debug)]
struct WeightsArgs {
    #[arg(long)]
    scheme: Option<String>,
    /// Grid size, e.g. 8x8.
    #[arg(long)]
    grid: Option<String>,
    /// 1-based `row,col` of the query.
    #[arg(long)]
    query: Option<String>,
    #[arg(long)]
    r_max: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    partition: Option<String>,
    /// normalized or unnormalized.
    #[arg(long)]
    merge: Option<String>,
    /// shifted or unshifted.
    #[arg(long)]
    offset: Option<String>,
}

impl WeightsArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        push(&mut v, "scheme", &self.scheme);
        push(&mut v, "grid", &self.grid);
        push(&mut v, "query", &self.query);
        push(&mut v, "r_max", &self.r_max);
        push(&mut v, "tau", &self.tau);
        push(&mut v, "partition", &self.partition);
        push(&mut v, "merge", &self.merge);
        push(&mut v, "offset", &self.offset);
        v
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// local-majority or scattered-vs-clustered.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    ripple_layers: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        push(&mut v, "task", &self.task);
        push(&mut v, "grid", &self.grid);
        push(&mut v, "steps", &self.steps);
        push(&mut v, "batch", &self.batch);
        push(&mut v, "lr", &self.lr);
        push(&mut v, "momentum", &self.momentum);
        push(&mut v, "optimizer", &self.optimizer);
        push(&mut v, "layers", &self.layers);
        push(&mut v, "ripple_layers", &self.ripple_layers);
        push(&mut v, "log_every", &self.log_every);
        push(&mut v, "train_size", &self.train_size);
        v
    }
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let file = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            Some(config::parse_ini(&text)?)
        }
        None => None,
    };
    let mut global = Vec::new();
    push(&mut global, "seed", &cli.seed);
    push(&mut global, "dtype", &cli.dtype);
    push(&mut global, "threads", &cli.threads);
    push(&mut global, "out", &cli.out.as_ref().map(|p| p.display().to_string()));
    let (name, flags) = match &cli.command {
        Command::Check(a) => ("check", a.overrides()),
        Command::Gradcheck(a) => ("gradcheck", a.overrides()),
        Command::Bench(a) => ("bench", a.overrides()),
        Command::Weights(a) => ("weights", a.overrides()),
        Command::Train(a) => ("train", a.overrides()),
    };
    let settings = config::Settings::resolve(name, file.as_ref(), &global, &flags)?;
    let ctx = commands::Context::new(settings)?;
    match cli.command {
        Command::Check(_) => commands::check::run(&ctx),
        Command::Gradcheck(_) => commands::gradcheck::run(&ctx),
        Command::Bench(_) => commands::bench::run(&ctx),
        Command::Weights(_) => commands::weights::run(&ctx),
        Command::Train(_) => commands::train::run(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
