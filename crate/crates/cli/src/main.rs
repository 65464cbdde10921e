//! Command-line entry point: retrospective detection on CSV data,
//! scenario simulation, batched benchmarks, and control-chart output.

mod chart;
mod commands;
mod csvio;
mod error;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vscout_core::simgen::{Distribution, ShiftType};

#[derive(Parser)]
#[command(
    name = "vscout",
    version,
    about = "Retrospective anomaly detection for high-dimensional process data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run detection on a CSV sample and write a run record.
    Detect(DetectArgs),
    /// Generate a synthetic scenario as CSV data plus truth labels.
    Simulate(SimulateArgs),
    /// Run seeded Monte Carlo replications over a scenario file.
    Benchmark(BenchmarkArgs),
    /// Draw the control chart for an existing run record.
    Chart(ChartArgs),
}

#[derive(Args)]
pub struct DetectArgs {
    /// Input CSV: header row, one numeric observation per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Optional truth CSV (header `label`, values 0/1) for metrics.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed; overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run record destination (JSON); stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also write the control chart (SVG) here.
    #[arg(long)]
    pub chart: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Base distribution: normal, t5, lognormal, mixed, multimodal.
    #[arg(long)]
    pub dist: Distribution,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 150)]
    pub p: usize,
    /// Mean shift added to every coordinate of a contaminated row.
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    /// Fraction of observations replaced by shifted samples.
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    /// Placement of contaminated rows: transient, sustained, none.
    #[arg(long, default_value = "none")]
    pub shift: ShiftType,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Data CSV destination.
    #[arg(long)]
    pub output: PathBuf,
    /// Truth CSV destination.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchmarkArgs {
    /// Scenario file (JSON): a list of scenario specs with replication
    /// counts and an optional pipeline configuration.
    #[arg(long)]
    pub scenarios: PathBuf,
    /// Results CSV destination.
    #[arg(long)]
    pub output: PathBuf,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args)]
pub struct ChartArgs {
    /// Run record produced by `detect`.
    #[arg(long)]
    pub record: PathBuf,
    /// SVG destination; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Detect(args) => commands::cmd_detect(args),
        Command::Simulate(args) => commands::cmd_simulate(args),
        Command::Benchmark(args) => commands::cmd_benchmark(args),
        Command::Chart(args) => commands::cmd_chart(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
