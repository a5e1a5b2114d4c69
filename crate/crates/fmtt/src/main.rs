use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fmtt::commands::{load_experiment, Runner};
use fmtt::config::ConfigError;
use fmtt::exec::Pool;
use fmtt::verify;
use serde_json::json;

#[derive(Parser)]
#[command(name = "fmtt", version, about = "Reward-tilted sampling with flow-map look-ahead")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Use the literal printed discrepancy sign and expectation update.
    #[arg(long)]
    paper_literal: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Tilted SMC sampling with oracle comparison.
    Sample(RunArgs),
    /// Greedy top-n search against a no-selection baseline.
    Search(RunArgs),
    /// Discrepancy trace, barrier profile and one refined schedule.
    Diagnose(RunArgs),
    /// Iterated schedule refinement.
    Refine(RunArgs),
    /// Runs the invariant suites and prints a pass/fail table.
    Verify {
        /// Run a single suite.
        #[arg(long)]
        only: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative tolerance for the flow-map oracle checks.
        #[arg(long, default_value_t = verify::DEFAULT_REL_TOL)]
        rel_tol: f64,
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn report_error(kind: &str, err: &dyn std::fmt::Display, out: Option<&PathBuf>) -> ExitCode {
    let report = json!({ "status": "error", "kind": kind, "message": err.to_string() });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(dir) = out {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), &text);
        }
    }
    eprintln!("{text}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, which) = match cli.command {
        Command::Verify { only, seed, rel_tol, out } => {
            let options = verify::Options { seed, rel_tol, only };
            return match verify::run(&options) {
                Ok(report) => {
                    println!("{}", report.table());
                    if let Some(dir) = out {
                        let write = std::fs::create_dir_all(&dir)
                            .and_then(|_| std::fs::write(dir.join("verify.json"), report.to_json()));
                        if let Err(e) = write {
                            return report_error("io", &e, None);
                        }
                    }
                    if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE }
                }
                Err(e) => report_error("invalid", &e, out.as_ref()),
            };
        }
        Command::Sample(a) => (a, "sample"),
        Command::Search(a) => (a, "search"),
        Command::Diagnose(a) => (a, "diagnose"),
        Command::Refine(a) => (a, "refine"),
    };
    let experiment = match load_experiment(&args.config, args.seed, args.paper_literal) {
        Ok(e) => e,
        Err(e) => return report_error(ConfigError::kind(&e), &e, Some(&args.out)),
    };
    let pool = match Pool::from_env() {
        Ok(p) => p,
        Err(e) => return report_error("environment", &e, Some(&args.out)),
    };
    let runner = Runner::new(&experiment, &pool, &args.out);
    let result = match which {
        "sample" => runner.sample(),
        "search" => runner.search(),
        "diagnose" => runner.diagnose(),
        _ => runner.refine(),
    };
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => report_error("run", &format!("{e:#}"), Some(&args.out)),
    }
}
