//! `tilin`: certify, bound and compare robustness radii of small classifiers.

mod commands;
mod job;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tilin_core::propagate::Norm;
use tilin_core::relaxation::AnchorPolicy;

use crate::job::{InputSpec, LabelSpec};

/// Exit status when `--strict` sees a misclassified input.
const EXIT_MISCLASSIFIED: u8 = 2;
/// Exit status when an oracle check finds a violation.
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "tilin", version, about = "Linear-relaxation robustness certification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Binary-search the certified radius of every selected input.
    Verify(VerifyArgs),
    /// Per-layer bounds over the ball of a fixed radius.
    Bounds(BoundsArgs),
    /// Certify under several policies and norms and emit a CSV table.
    Compare(CompareArgs),
    /// Check certified radii and bounds against sampling and attack oracles.
    OracleCheck(OracleArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Network JSON file.
    #[arg(long)]
    model: std::path::PathBuf,
    /// Input file, optionally suffixed with `:json`, `:csv` or `:idx`.
    #[arg(long)]
    input: InputSpec,
    /// Inputs to use: `3`, `0..9` (inclusive) or `1,4,7`. Default: all.
    #[arg(long)]
    indices: Option<job::IndexSelection>,
    /// Draw this many inputs at random (seeded) from the selection.
    #[arg(long)]
    sample: Option<usize>,
    /// True label for every input, or `auto` to use the network's prediction.
    #[arg(long, default_value = "auto")]
    label: LabelSpec,
    /// Per-input labels (JSON array or IDX label file); overrides `--label`.
    #[arg(long)]
    labels: Option<std::path::PathBuf>,
    /// Perturbation norm: 1, 2 or inf.
    #[arg(long, default_value = "inf", value_parser = parse_norm)]
    norm: Norm,
    /// Anchor policy: forward or midpoint.
    #[arg(long, default_value = "forward", value_parser = parse_policy)]
    policy: AnchorPolicy,
    /// Seed for input sampling and oracles.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SearchArgs {
    /// Number of bound computations in the radius search.
    #[arg(long, default_value_t = 15)]
    iters: usize,
    /// Initial radius of the search.
    #[arg(long, default_value_t = 0.05)]
    eps0: f64,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// Exit with status 2 when an input is misclassified.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Radius of the perturbation ball.
    #[arg(long)]
    eps: f64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// Policies to compare.
    #[arg(long, value_delimiter = ',', default_value = "forward,midpoint", value_parser = parse_policy)]
    policies: Vec<AnchorPolicy>,
    /// Norms to run; `--norm` is ignored by this subcommand.
    #[arg(long, value_delimiter = ',', default_value = "1,2,inf", value_parser = parse_norm)]
    norms: Vec<Norm>,
    /// Policy the improvement percentage is measured against.
    #[arg(long, default_value = "midpoint", value_parser = parse_policy)]
    baseline: AnchorPolicy,
    /// Also write a JSON summary (mean radius and mean time per method).
    #[arg(long)]
    summary: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// Reports written by `verify` to check instead of certifying afresh.
    #[arg(long)]
    report: Option<std::path::PathBuf>,
    /// Layer bounds written by `bounds` to check against sampled activations.
    /// Without `--report`, only these are checked.
    #[arg(long)]
    bounds: Option<std::path::PathBuf>,
    /// Sampled ball points per check.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Extra radius at which layer bounds are checked, besides each certified radius.
    #[arg(long)]
    eps: Option<f64>,
}

fn parse_norm(s: &str) -> Result<Norm, String> {
    s.parse().map_err(|e: tilin_core::Error| e.to_string())
}

fn parse_policy(s: &str) -> Result<AnchorPolicy, String> {
    s.parse().map_err(|e: tilin_core::Error| e.to_string())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("TILIN_THREADS") {
        let threads: usize = value
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("TILIN_THREADS must be a positive integer, got '{value}'"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::FAILURE,
            };
        }
    };

    let result = configure_threads().and_then(|()| match cli.command {
        Command::Verify(args) => commands::verify(&args),
        Command::Bounds(args) => commands::bounds(&args),
        Command::Compare(args) => commands::compare(&args),
        Command::OracleCheck(args) => commands::oracle_check(&args),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
