use std::path::PathBuf;
use std::process::ExitCode;

use abreu_core::cli::{self, Subcommand};
use clap::Parser;

/// Solves, audits and validates the generalized Abreu equation from a JSON
/// run configuration.
#[derive(Parser, Debug)]
#[command(name = "abreu-lab", version)]
struct Args {
    subcommand: Subcommand,
    config: PathBuf,
    /// Overrides as `--key value` or `--key=value`; keys are dotted paths
    /// into the configuration.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = cli::parse_overrides(&args.overrides).and_then(|o| cli::run(args.subcommand, &args.config, &o));
    match &result {
        Ok(o) => {
            println!("{}", o.summary);
            for a in &o.artifacts {
                println!("wrote {}", a.display());
            }
        }
        Err(e) => eprintln!("{} error: {e}", e.module()),
    }
    ExitCode::from(cli::exit_code(&result) as u8)
}
