use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coda_core::CodaError;

mod bench;
mod commands;

/// Soft top-k routing, conditional adapter layers and their accounting.
#[derive(Debug, Parser)]
#[command(name = "coda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve soft top-k for a score vector and compare with the oracle.
    Route(RouteArgs),
    /// Train a two-layer encoder on the planted-relevance task.
    Train(TrainArgs),
    /// Time layer forward passes over a config grid.
    Bench(BenchArgs),
    /// Closed-form multiply-add counts for a layer config.
    Flops(FlopsArgs),
    /// Export per-layer routing scores as PGM images and CSV.
    Heatmap(HeatmapArgs),
    /// Run the property suite; exits 2 if any check fails.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct RouteArgs {
    /// Score vector file (1×n tensor text).
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 4.0)]
    eps0: f64,
    #[arg(long, default_value_t = 0.03)]
    eps: f64,
    #[arg(long, default_value_t = 0.7)]
    beta: f64,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON with optional `model`, `task` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// soft_topk, sigmoid_gate or truncation.
    #[arg(long)]
    router: Option<String>,
    /// Reduction factor r (k = ⌈n/r⌉).
    #[arg(long)]
    r: Option<f64>,
    /// Metrics trace CSV; stdout when omitted.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// BenchSpec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the bench spec's output path; stdout when neither is set.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    /// Layer config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ffn: Option<usize>,
    #[arg(long)]
    d_adpt: Option<usize>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// k_to_k or k_to_all.
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// n×d input tensor; a `# grid H W` comment lays tokens out in 2-D.
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated layer indices; all layers when omitted.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    /// Output prefix; writes `<prefix>_layer<i>.pgm` and `.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VERIFY: u8 = 2;
pub const EXIT_IO: u8 = 3;

pub fn exit_code(err: &CodaError) -> u8 {
    match err {
        CodaError::Io(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Route(a) => commands::route(a),
        Command::Train(a) => commands::train(a),
        Command::Bench(a) => bench::run(a),
        Command::Flops(a) => commands::flops(a),
        Command::Heatmap(a) => commands::heatmap(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
