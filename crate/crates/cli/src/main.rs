use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use explore_prob::experiment::{run_experiment, ExperimentConfig, ExperimentKind};
use explore_prob::Error;

/// Exploration-probability experiments and parameter advice for chain MDPs.
#[derive(Parser)]
#[command(name = "explore-prob", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run(Common),
    /// Recommend m, rank hardness and classify failures for an ADVISE config.
    Advise(Common),
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory that output paths are relative to.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for Monte Carlo batches (defaults to all cores).
    #[arg(long)]
    workers: Option<usize>,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Validation(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn execute(common: &Common, advise: bool) -> Result<u8, Error> {
    if let Some(workers) = common.workers {
        if workers == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        // Only fails if the pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    if advise && config.experiment != ExperimentKind::Advise {
        return Err(Error::Config(format!(
            "advise needs an ADVISE config, got {:?}",
            config.experiment
        )));
    }
    let out = run_experiment(&config, &common.out_dir)?;
    if let Some(report) = &out.advise {
        print!("{}", report.render());
    }
    println!("wrote {}", out.output.display());
    for extra in &out.extra {
        println!("wrote {}", extra.display());
    }
    println!("wrote {}", out.metadata.display());
    Ok(if out.infeasible() { EXIT_INFEASIBLE } else { 0 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, advise) = match &cli.command {
        Command::Run(c) => (c, false),
        Command::Advise(c) => (c, true),
    };
    match execute(common, advise) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
