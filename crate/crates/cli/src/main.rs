//! `lorac`: command-line front end for running continual-learning experiments,
//! ablations, report recomputation and the numerical self-checks.
//!
//! Every subcommand exits with status 0 on success. Failures exit nonzero and
//! print a single JSON object `{"error": {"kind": ..., "message": ...}}` to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lorac_core::checks::{gradcheck_suites, selftest_suites, SuiteReport};
use lorac_core::experiment::{
    emit_reports, parse_stages, read_results, recompute_metrics, run_ablation, run_experiment,
    RunConfig, RESULTS_FILE, VARIANT_CHAIN,
};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "lorac",
    version,
    about = "Weighted orthogonal LoRA composition with important-parameter freezing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the cumulative ablation chain and print a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated chain stages.
        #[arg(long, default_value_t = VARIANT_CHAIN.join(","))]
        variants: String,
        /// Number of seeds, starting from the config's seed.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Directory for per-run reports and `ablation.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the metrics of a finished run from its results document.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Run every property suite.
    Selftest,
}

/// A failure as reported on stderr.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<lorac_core::Error> for Failure {
    fn from(e: lorac_core::Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn print_suites(suites: &[SuiteReport]) -> Result<(), Failure> {
    for s in suites {
        println!(
            "{} {:<16} instances={:<3} worst={:.3e} tolerance={:.1e}",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.instances,
            s.worst,
            s.tolerance
        );
    }
    let failed: Vec<&str> = suites
        .iter()
        .filter(|s| !s.passed)
        .map(|s| s.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            kind: "check",
            message: format!("suites failed: {}", failed.join(", ")),
        })
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let artifacts = run_experiment(&cfg)?;
            emit_reports(&artifacts, &out)?;
            let r = &artifacts.results;
            println!(
                "{}",
                json!({
                    "out": out,
                    "tasks": r.accuracy_matrix.tasks(),
                    "avg_acc": r.avg_acc,
                    "forgetting": r.forgetting,
                })
            );
            Ok(())
        }
        Command::Ablate {
            config,
            variants,
            seeds,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let stages = parse_stages(&variants)?;
            if seeds == 0 {
                return Err(Failure {
                    kind: "config",
                    message: "--seeds must be positive".into(),
                });
            }
            let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
            let report = run_ablation(&cfg, &stages, &seed_list, out.as_deref())?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Report { run } => {
            let doc = read_results(run.join(RESULTS_FILE))?;
            let recomputed = recompute_metrics(&doc)?;
            let text = serde_json::to_string_pretty(&recomputed).map_err(|e| Failure {
                kind: "data",
                message: e.to_string(),
            })?;
            println!("{text}");
            if recomputed.matches_document {
                Ok(())
            } else {
                Err(Failure {
                    kind: "data",
                    message: "stored metrics differ from the accuracy matrix".into(),
                })
            }
        }
        Command::Gradcheck { instances } => print_suites(&gradcheck_suites(instances)?),
        Command::Selftest => print_suites(&selftest_suites()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!(
                "{}",
                json!({ "error": { "kind": f.kind, "message": f.message } })
            );
            ExitCode::FAILURE
        }
    }
}
