use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctxnorm::gradcheck::{run_suite, SuiteConfig};
use ctxnorm_cli::{emit_summary_table, run_experiment_with, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "ctxnorm", version, about = "Compare normalization layers on small models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method and write curves plus summary.json.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the summary table of a report directory.
    Table { dir: PathBuf },
    /// Check every layer's analytic gradients against finite differences.
    Gradcheck {
        /// Relative-error tolerance; ACN gets ten times this.
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

fn run(cmd: Command) -> Result<bool, Box<dyn std::error::Error>> {
    match cmd {
        Command::Run { config, seed, out, epochs } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply(&Overrides { seed, out_dir: out, epochs });
            let summary = run_experiment_with(&cfg, |msg| eprintln!("{msg}"))?;
            print!("{}", ctxnorm_cli::format_table(&summary));
            eprintln!("report written to {}", cfg.out_dir.display());
            Ok(true)
        }
        Command::Table { dir } => {
            print!("{}", emit_summary_table(&dir)?);
            Ok(true)
        }
        Command::Gradcheck { tolerance } => {
            let mut cfg = SuiteConfig::default();
            if let Some(t) = tolerance {
                cfg.tolerance = t;
                cfg.acn_tolerance = 10.0 * t;
            }
            let checks = run_suite(&cfg)?;
            for c in &checks {
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                println!(
                    "{verdict}  {:<15} max rel error {:.3e} (tolerance {:.0e}) at {}",
                    c.layer, c.max_rel_error, c.tolerance, c.worst
                );
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
