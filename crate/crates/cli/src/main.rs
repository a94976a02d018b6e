use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use divband_cli::{run_converge, run_simulate, run_solve, run_verify, Overrides};

/// Optimal dividend bands with line-wise reinsurance.
#[derive(Parser)]
#[command(name = "divband", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve on the grid; writes value_function.csv, policy.json, residual_report.json.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Grid step.
        #[arg(long)]
        h: Option<f64>,
        /// Right end of the march; adaptive when unset.
        #[arg(long)]
        x_max: Option<f64>,
    },
    /// Monte Carlo value of a solved policy; writes simulation_report.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// policy.json to use; defaults to the one in the output directory.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check solved artifacts; writes verification_report.json.
    Verify {
        #[command(flatten)]
        common: Common,
        /// policy.json to check; defaults to the one in the output directory.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Grid-refinement study; writes convergence.csv.
    Converge {
        #[command(flatten)]
        common: Common,
        /// Steps, coarse to fine.
        #[arg(long, value_delimiter = ',')]
        h_list: Option<Vec<f64>>,
        /// Right end of the march; adaptive when unset.
        #[arg(long)]
        x_max: Option<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (config, ov, run): (PathBuf, Overrides, fn(&std::path::Path, &Overrides) -> _) = match cli.command {
        Command::Solve { common, h, x_max } => (
            common.config,
            Overrides { h, x_max, out: common.out, ..Default::default() },
            run_solve,
        ),
        Command::Simulate { common, policy, paths, seed } => (
            common.config,
            Overrides { policy, paths, seed, out: common.out, ..Default::default() },
            run_simulate,
        ),
        Command::Verify { common, policy } => (
            common.config,
            Overrides { policy, out: common.out, ..Default::default() },
            run_verify,
        ),
        Command::Converge { common, h_list, x_max } => (
            common.config,
            Overrides { h_list, x_max, out: common.out, ..Default::default() },
            run_converge,
        ),
    };
    match run(&config, &ov) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
