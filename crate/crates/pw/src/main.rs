//! Command-line front end: loads a TOML experiment description, applies the
//! CLI overrides, and runs one stage, the whole pipeline, or a sweep.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pwstrain::config::{apply_overrides, load_config};
use pwstrain::par;
use pwstrain::pipeline::{Runner, Stage, StageOutcome};
use pwstrain::Error;

#[derive(Parser)]
#[command(
    name = "pw",
    version,
    about = "Plane-wave vascular strain imaging pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize channel data for every frame of the configured phantom
    Simulate(RunArgs),
    /// Delay-and-sum each event onto its receive grid, then compound
    Beamform(RunArgs),
    /// Track frame pairs per medium and triangulate vector displacement
    Track(RunArgs),
    /// Differentiate the vector displacement into strain maps
    Strain(RunArgs),
    /// Point-spread or error metrics for the configured phantom
    Metrics(RunArgs),
    /// Run every stage that applies to the config, reusing cached stages
    Pipeline(RunArgs),
    /// Run the sweep grid in the config and aggregate CSV/plot summaries
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment description (TOML with explicit units)
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory from the config
    #[arg(long)]
    out: Option<String>,
    /// Override the phantom seed; the noise seed is derived from it
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 selects the sequential reference path
    #[arg(long)]
    threads: Option<usize>,
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a)
            | Command::Beamform(a)
            | Command::Track(a)
            | Command::Strain(a)
            | Command::Metrics(a)
            | Command::Pipeline(a)
            | Command::Sweep(a) => a,
        }
    }
}

const CONFIG_EXIT: u8 = 2;
const STAGE_EXIT: u8 = 3;

fn classify(e: Error) -> (u8, Error) {
    match e {
        Error::Config(_) => (CONFIG_EXIT, e),
        other => (STAGE_EXIT, other),
    }
}

fn report(outcome: &StageOutcome) {
    let note = if outcome.cached { " (cached)" } else { "" };
    println!(
        "stage {}: {} artifacts{note}",
        outcome.stage,
        outcome.outputs.len()
    );
}

fn run(command: &Command) -> Result<(), (u8, Error)> {
    let args = command.args();
    let (mut cfg, text) = load_config(&args.config).map_err(|e| (CONFIG_EXIT, e))?;
    apply_overrides(&mut cfg, args.out.as_deref(), args.seed);
    let runner = Runner::new(&cfg, &text).map_err(|e| (CONFIG_EXIT, e))?;
    par::with_thread_count(args.threads, || {
        match command {
            Command::Pipeline(_) => {
                for outcome in runner.run_pipeline().map_err(classify)? {
                    report(&outcome);
                }
            }
            Command::Sweep(_) => {
                runner.run_sweep().map_err(classify)?;
                println!("sweep summaries in {}", runner.out_dir().join("sweep").display());
            }
            Command::Simulate(_) => report(&runner.run_stage(Stage::Simulate).map_err(classify)?),
            Command::Beamform(_) => report(&runner.run_stage(Stage::Beamform).map_err(classify)?),
            Command::Track(_) => report(&runner.run_stage(Stage::Track).map_err(classify)?),
            Command::Strain(_) => report(&runner.run_stage(Stage::Strain).map_err(classify)?),
            Command::Metrics(_) => report(&runner.run_stage(Stage::Metrics).map_err(classify)?),
        }
        println!("artifacts in {}", runner.out_dir().display());
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
