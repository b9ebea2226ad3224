use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pfeddc::federation::Method;
use pfeddc::harness::{self, RunOptions};
use pfeddc::Error;

/// Deterministic simulator of personalized federated dual-prompt learning.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment plan.
    Simulate {
        /// Plan file (TOML, or JSON with a .json extension).
        #[arg(long)]
        config: PathBuf,
        /// Re-run cells that already completed.
        #[arg(long)]
        force: bool,
        /// Output directory; overrides the plan's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of cells to run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Rank methods per setting from a summary.json.
    Compare {
        #[arg(long)]
        summary: PathBuf,
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Label-skew statistics of a Dirichlet split.
    PartitionStats {
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        clients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            config,
            force,
            out,
            parallel,
        } => {
            let mut plan = harness::load_plan(&config)?;
            if let Some(out) = out {
                plan.output_dir = out;
            }
            let dir = plan.resolved_output_dir();
            let report = harness::run_plan(&plan, &dir, RunOptions { force, parallel })?;
            println!(
                "{} run, {} skipped, {} failed; summary at {}",
                report.executed.len(),
                report.skipped.len(),
                report.failed.len(),
                report.summary_path.display()
            );
            for (id, err) in &report.failed {
                eprintln!("failed: {id}: {err}");
            }
            if report.succeeded() {
                Ok(())
            } else {
                Err(Failure::Runtime(format!("{} run(s) failed", report.failed.len())))
            }
        }
        Command::Compare { summary, methods } => {
            let methods = methods
                .iter()
                .map(|m| m.trim().parse::<Method>())
                .collect::<Result<Vec<_>, _>>()?;
            let summary = harness::read_summary(&summary)?;
            let report = harness::compare_methods(&summary, &methods)?;
            print!("{report}");
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let report = harness::gradcheck(seed)?;
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Runtime("gradient check failed".into()))
            }
        }
        Command::PartitionStats { beta, clients, seed } => {
            let stats = harness::partition_stats(beta, clients, seed)?;
            println!("client  support  counts per class");
            for (k, (support, counts)) in stats.support.iter().zip(&stats.counts).enumerate() {
                println!("{k:>6}  {support:>7}  {counts:?}");
            }
            println!("median support   {}", stats.median_support);
            println!("mean max share   {:.4}", stats.mean_max_share);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Bad arguments are a validation failure; --help and --version are not.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
