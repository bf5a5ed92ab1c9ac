use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use worldkit::harness::{self, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "worldkit", version, about = "Run, replay and inspect world-model experiments")]
struct Cli {
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's `output_dir`, then runs/<env>-<seed>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run { config: PathBuf },
    /// Re-check a run directory's log and summary.
    Replay { dir: PathBuf },
    /// Write CSV curves for a run directory.
    Plots { dir: PathBuf },
    /// Run structure search on data from the configured environment.
    Search { config: PathBuf },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, HarnessError> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    match &cli.command {
        Command::Run { config } => {
            let config = load(config, cli.seed)?;
            let dir = harness::output_dir(&config, cli.out.as_deref());
            let summary = harness::run_experiment(&config, &dir)?;
            println!("wrote {} ({} episodes)", dir.display(), summary.episodes);
            if let Some(rate) = summary.success_rate {
                println!("success rate {rate}");
            }
        }
        Command::Replay { dir } => {
            let summary = harness::replay(dir)?;
            println!("replay ok: {} episodes", summary.episodes);
        }
        Command::Plots { dir } => {
            for path in harness::emit_plots(dir)? {
                println!("{}", path.display());
            }
        }
        Command::Search { config } => {
            let config = load(config, cli.seed)?;
            let dir = harness::output_dir(&config, cli.out.as_deref());
            let outcome = harness::run_search(&config, &dir)?;
            println!(
                "best F {:.4} after {} fits: {}",
                outcome.best_score.free_energy,
                outcome.fits,
                serde_json::to_string(&outcome.best).unwrap_or_default()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
