//! `kpx`: kernel tools, subsampling, synthetic data, training, evaluation,
//! benchmarks and parameter audits.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when the command
//! itself fails.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kpx::bench::BenchOp;

#[derive(Debug, Parser)]
#[command(name = "kpx", version, about = "Kernel point convolutions for 3D point clouds")]
struct Cli {
    /// Worker threads for operator kernels; overrides KPX_THREADS (default 1)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Kernel point dispositions
    #[command(subcommand)]
    Kernel(KernelCommand),
    /// Grid-subsample a PLY cloud
    Subsample(SubsampleArgs),
    /// Write a synthetic dataset as PLY files
    Synth(SynthArgs),
    /// Train a model and evaluate it on the validation split
    Train(TrainArgs),
    /// Evaluate a checkpoint with rotation voting
    Eval(EvalArgs),
    /// Time an operator over a parameter sweep
    Bench(BenchArgs),
    /// Per-module parameter counts of an architecture
    Params(ParamsArgs),
}

#[derive(Debug, Subcommand)]
enum KernelCommand {
    /// Optimize a disposition and write it as text
    Init {
        /// Points per shell, center first
        #[arg(long, value_delimiter = ',', default_value = "1,14,28")]
        shells: Vec<usize>,
        #[arg(long, default_value_t = 2.1)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file (standard output when absent)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report shell, center and spacing invariants of a disposition file
    Check {
        file: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Nearest-kernel region map on a probe grid
    Regions {
        file: PathBuf,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        /// Per-probe CSV (x,y,z,region)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct SubsampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    cell: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Seg,
    Cls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OperatorArg {
    Kpconvx,
    Kpconvd,
}

/// Synthetic data settings shared by `synth`, `train` and `eval`.
#[derive(Debug, Default, Args)]
struct SynthFlags {
    /// Gaussian noise added to synthetic point coordinates
    #[arg(long)]
    noise: Option<f64>,
    /// Points drawn per synthetic cloud before subsampling
    #[arg(long)]
    points: Option<usize>,
    #[arg(long = "train-clouds")]
    train_clouds: Option<usize>,
    #[arg(long = "val-clouds")]
    val_clouds: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "seg")]
    task: TaskArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    synth: SynthFlags,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Architecture preset (default tiny-seg)
    #[arg(long)]
    preset: Option<String>,
    /// Run file with preset, [architecture], [train] and [data] sections
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    operator: Option<OperatorArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer steps per epoch
    #[arg(long)]
    steps: Option<usize>,
    /// Forward passes per optimizer step
    #[arg(long)]
    accumulation: Option<usize>,
    /// Clouds per forward pass
    #[arg(long = "batch-clouds")]
    batch_clouds: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[command(flatten)]
    synth: SynthFlags,
    /// Dataset directory with train/ and val/ PLY files instead of synthetic data
    #[arg(long)]
    data: Option<PathBuf>,
    /// Rotation votes for the final evaluation
    #[arg(long)]
    votes: Option<usize>,
    /// Per-epoch CSV log (epoch,step,lr,loss,acc)
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    votes: usize,
    /// Seed of the synthetic validation split
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    synth: SynthFlags,
    /// PLY directory (its val/ subdirectory when present)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Per-class IoU CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value = "kpconvd")]
    op: BenchOp,
    /// Swept parameter and values, e.g. K=15,27,43
    #[arg(long, default_value = "K=15,27,43")]
    sweep: String,
    #[arg(long, default_value_t = 4096)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    h: usize,
    #[arg(long, default_value_t = 128)]
    c: usize,
    #[arg(long, default_value_t = 15)]
    k: usize,
    /// Channels per modulation group
    #[arg(long, default_value_t = 8)]
    groups: usize,
    /// Output channels of the dense operator
    #[arg(long, default_value_t = 128)]
    cout: usize,
    #[arg(long, default_value_t = 7)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV (standard output when absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    /// Preset name or TOML file
    #[arg(long, default_value = "kpconvx-l")]
    arch: String,
    #[arg(long)]
    classes: Option<usize>,
    /// Channels per modulation group, or C for one group
    #[arg(long)]
    groups: Option<String>,
    /// Count analytically instead of constructing the model
    #[arg(long)]
    analytic: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    kpx::parallel::init_from_env();
    if let Some(n) = cli.threads {
        kpx::parallel::set_threads(n);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
