use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;

use icudil::cli::{execute, exit_code, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = execute(&cli).context("icudil failed");
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<icudil::Error>().map(exit_code).unwrap_or(3);
            ExitCode::from(code)
        }
    }
}
