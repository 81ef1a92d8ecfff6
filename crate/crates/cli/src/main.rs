mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pointmtl::Error;

#[derive(Parser)]
#[command(name = "pointmtl", version, about = "Multi-task feature learning on point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of labelled primitive shapes.
    Synth(SynthArgs),
    /// Train the encoder and its task heads.
    Train(TrainArgs),
    /// Evaluate frozen features of a checkpoint.
    Eval(EvalArgs),
    /// Write the shape features of a dataset to a text file.
    Export(ExportArgs),
    /// Run the built-in gradient, oracle and invariance checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for point files and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated shape kinds.
    #[arg(long, default_value = "sphere,cube,cylinder,torus")]
    kinds: String,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 256)]
    points: usize,
    /// Gaussian noise added before normalization.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

/// Where the run configuration comes from and the flags allowed to
/// override it.
#[derive(Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML). Without it the preset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Dataset manifest, overriding the configuration.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Enabled tasks, e.g. `reconstruction` or `clustering,reconstruction`.
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Print the fully resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Probe,
    Zeroshot,
    Partseg,
    Nmi,
    Export,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    protocol: Protocol,
    /// Checkpoint file; defaults to the one in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fraction of training points used by the part-segmentation probe.
    #[arg(long)]
    fraction: Option<f64>,
    /// Cluster count of the zero-shot protocol.
    #[arg(long)]
    clusters: Option<usize>,
    /// Report file; defaults to `eval_<protocol>.tsv` next to the checkpoint.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExportArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Embedding file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fewer random trials, for a fast smoke check.
    #[arg(long)]
    quick: bool,
    /// Negate the backward rule of the named op (exercises the checks).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 2,
        Error::Io { .. } => 3,
        _ => 1,
    }
}

fn init_threads() -> pointmtl::Result<()> {
    let Ok(value) = std::env::var("POINTMTL_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("POINTMTL_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))
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
    let result = init_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Export(a) => commands::export(&a),
        Command::Verify(a) => commands::verify(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
