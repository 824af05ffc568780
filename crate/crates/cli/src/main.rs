use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedtree_cli::check::{cmd_check, CheckOptions};
use fedtree_cli::lora_projection;
use fedtree_cli::sweep::cmd_sweep;
use fedtree_cli::threads::with_thread_cap;
use fedtree_cli::{cmd_run, CliError};

#[derive(Parser)]
#[command(
    name = "fedtree",
    version,
    about = "Tree-structured layer-wise federated LoRA experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in oracle and invariant battery.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        disable_lambda_clamp: bool,
    },
    /// One run per value of a single parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of tau, K, eta, E, divergence_scale.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, out, seed } => {
            let manifest = with_thread_cap(|| cmd_run(&config, &out, seed))??;
            println!("wrote {} in {:.2}s", manifest.out_dir.display(), manifest.duration_secs);
            Ok(())
        }
        Command::Check {
            seed,
            disable_lambda_clamp,
        } => {
            let opts = CheckOptions {
                seed,
                projection: lora_projection(!disable_lambda_clamp),
            };
            let (table, verdict) = with_thread_cap(|| cmd_check(opts))?;
            print!("{table}");
            verdict
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let rows = with_thread_cap(|| cmd_sweep(&config, &param, &values, &out))??;
            println!("wrote {} runs to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedtree: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
