use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use olrl_cli::{
    emit_checks, emit_results, load_config, parse_seeds, run_checks, run_experiment, run_sweep,
    CliError, ExperimentResult,
};
use olrl::algorithms::RunConfig;

#[derive(Parser)]
#[command(
    name = "olrl",
    version,
    about = "Open-loop trajectory optimization experiments on the cart-pole swing-up"
)]
struct Cli {
    /// Worker threads for seed-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config across seeds and emit curves and summaries.
    Run {
        /// JSON config; omitted fields (or the whole flag) fall back to the
        /// stock pendulum defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Either a count N (seeds 0..N-1) or a comma-separated list.
        #[arg(long, default_value = "20")]
        seeds: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Grid one config key over several values, one subdirectory each.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config key to grid over: sigma, eta, alpha, q0, init_std, s, M,
        /// N or L.
        #[arg(long)]
        key: String,
        /// Comma-separated values for the swept key.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "20")]
        seeds: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Gradient and rate-guarantee self-checks against independent
    /// references.
    Check {
        /// Also write check.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn base_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => load_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn print_experiment(result: &ExperimentResult) {
    for run in &result.runs {
        match &run.error {
            Some(e) => println!("seed {:>3}: FAILED after {} rollouts: {e}", run.seed, run.total_rollouts),
            None => println!(
                "seed {:>3}: J_max {:+.6} {} ({} rollouts)",
                run.seed,
                run.j_max,
                if run.solved { "solved" } else { "unsolved" },
                run.total_rollouts
            ),
        }
    }
    println!(
        "solve rate {:.3} over {} seeds, {} failed",
        result.solve_rate(),
        result.runs.len(),
        result.failures()
    );
}

fn try_main() -> Result<bool, CliError> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Run { config, seeds, out } => {
            let cfg = base_config(&config)?;
            let seeds = parse_seeds(&seeds)?;
            let result = run_experiment(&cfg, &seeds)?;
            let files = emit_results(&result, &out)?;
            print_experiment(&result);
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(result.failures() > 0)
        }
        Command::Sweep { config, key, values, seeds, out } => {
            let cfg = base_config(&config)?;
            let seeds = parse_seeds(&seeds)?;
            let entries = run_sweep(&cfg, &key, &values, &seeds, &out)?;
            let mut any_failed = false;
            for entry in &entries {
                println!(
                    "{key} = {}: solve rate {:.3}, {} failed",
                    entry.value,
                    entry.result.solve_rate(),
                    entry.result.failures()
                );
                any_failed |= entry.result.failures() > 0;
            }
            println!("wrote {}", out.join("sweep.csv").display());
            Ok(any_failed)
        }
        Command::Check { out } => {
            let checks = run_checks()?;
            let mut any_failed = false;
            for c in &checks {
                println!(
                    "CHECK {}: {} (value {:.3e}, threshold {:.3e})",
                    c.name,
                    if c.pass { "PASS" } else { "FAIL" },
                    c.value,
                    c.threshold
                );
                any_failed |= !c.pass;
            }
            if let Some(dir) = out {
                let path = emit_checks(&checks, &dir)?;
                println!("wrote {}", path.display());
            }
            Ok(any_failed)
        }
    }
}

fn main() -> ExitCode {
    match try_main() {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
