use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use feo2_cli::analytic::{cmd_analytic, AnalyticTable, SweepOptions};
use feo2_cli::config::{read_file_config, render_toml, resolve};
use feo2_cli::run::cmd_run;
use feo2_cli::{cmd_solve_z, CliError};
use feo2_core::analytic::AnalyticParams;
use feo2_core::simulate::ExperimentConfig;

#[derive(Parser)]
#[command(name = "feo2", version, about = "Federated learning with opt-out differential privacy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write rounds.csv, summary.json and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Threads for client updates; results do not depend on it.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Check a config and print it with every default filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-form tables and plot data for the estimation setting.
    Analytic {
        #[arg(value_enum)]
        table: AnalyticTable,
        #[arg(long, default_value_t = 100)]
        clients: usize,
        #[arg(long, default_value_t = 95)]
        private: usize,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        /// Per-sample noise variance.
        #[arg(long, default_value_t = 0.25)]
        beta2: f64,
        #[arg(long, default_value_t = 0.5)]
        tau2: f64,
        #[arg(long, default_value_t = 0.01)]
        gamma2: f64,
        #[arg(long, default_value_t = 200_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3.0)]
        lambda_max: f64,
        #[arg(long, default_value_t = 0.05)]
        lambda_step: f64,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Smallest noise multiplier reaching a target (ε, δ).
    SolveZ {
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        /// Per-round sampling rate.
        #[arg(long)]
        q: f64,
        #[arg(long)]
        rounds: usize,
    },
}

fn load(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut file = read_file_config(config)?;
    if seed.is_some() {
        file.seed = seed;
    }
    resolve(&file)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seed, workers } => {
            let cfg = load(&config, seed)?;
            let outcome = cmd_run(&cfg, Some(&config), &out, workers)?;
            if let Some(e) = outcome.error {
                return Err(CliError::Run(e.to_string()));
            }
            eprintln!("{} rounds written to {}", outcome.reports.len(), out.display());
            Ok(())
        }
        Command::Validate { config, seed } => {
            let cfg = load(&config, seed)?;
            print!("{}", render_toml(&cfg));
            Ok(())
        }
        Command::Analytic {
            table,
            clients,
            private,
            samples,
            dim,
            beta2,
            tau2,
            gamma2,
            trials,
            seed,
            lambda_max,
            lambda_step,
            out,
            workers,
        } => {
            let p = AnalyticParams::new(clients, private, samples, dim, beta2, tau2, gamma2)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let opts = SweepOptions { trials, seed, lambda_max, lambda_step };
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers.max(1))
                .build()
                .map_err(|e| CliError::Io(e.to_string()))?;
            let text = pool.install(|| cmd_analytic(&p, table, &opts))?;
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::SolveZ { epsilon, delta, q, rounds } => {
            let (z, eps) = cmd_solve_z(epsilon, delta, q, rounds)?;
            println!("z,epsilon\n{z},{eps}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
