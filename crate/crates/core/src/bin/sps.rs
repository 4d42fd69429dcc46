use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use safe_policy_search::harness::{self, ExperimentConfig, RunOptions, OUTPUT_DIR_VAR};

/// Safe model-based policy search experiments.
///
/// CONFIG is a path to a TOML file or one of the bundled names:
/// linear_cars_safe, mountain_car, pendulum_swingup, cartpole.
#[derive(Parser)]
#[command(name = "sps", version, after_help = "Artifacts go to $SPS_OUTPUT_DIR (default ./runs).")]
struct Cli {
    /// Record real wall-clock times in episodes.csv (breaks byte-reproducibility).
    #[arg(long, global = true)]
    wall_time: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        config: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several seeds and aggregate them.
    Multi {
        config: String,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Mean return of a uniform-random policy.
    Baseline {
        config: String,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Draw learning_curve.svg from an episodes.csv.
    Plot { episodes: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let opts = RunOptions {
        wall_time: cli.wall_time,
        ..RunOptions::default()
    };
    match execute(cli.command, &opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn resolve(config: &str, seed: Option<u64>) -> safe_policy_search::error::Result<harness::ResolvedExperiment> {
    let (name, cfg) = ExperimentConfig::load(config)?;
    cfg.resolve(&name, seed)
}

fn execute(command: Command, opts: &RunOptions) -> safe_policy_search::error::Result<()> {
    match command {
        Command::Run { config, seed } => {
            let resolved = resolve(&config, seed)?;
            let out = harness::run_resolved(&resolved, opts)?;
            let a = &out.summary.aggregates;
            println!(
                "{}: {} episodes, {} violations, {} blocked, best safe return {}",
                out.summary.run_id,
                out.summary.episodes,
                a.violations,
                a.blocked,
                a.best_safe_return.map_or("n/a".to_string(), |r| format!("{r:.3}"))
            );
            println!("artifacts in {}", out.dir.display());
        }
        Command::Multi { config, seeds } => {
            let resolved = resolve(&config, None)?;
            let report = harness::run_multi_seed(&resolved, &seeds, opts)?;
            print!("{}", report.to_table());
            if report.failed > 0 {
                return Err(safe_policy_search::error::Error::InvalidArgument(format!("{} seed(s) failed", report.failed)));
            }
        }
        Command::Baseline { config, seeds } => {
            let resolved = resolve(&config, None)?;
            println!("{:.6}", harness::baseline_random(&resolved, &seeds)?);
        }
        Command::Plot { episodes } => {
            let dir = match std::env::var_os(OUTPUT_DIR_VAR) {
                Some(d) => PathBuf::from(d),
                None => episodes.parent().map(PathBuf::from).unwrap_or_default(),
            };
            let out = harness::plot_episodes_csv(&episodes, &dir)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}
