// SPDX-License-Identifier: MIT OR Apache-2.0

use std::process::ExitCode;

use truthx_cli::CliError;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    match truthx_cli::run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Args(_)) => {
            if let CliError::Args(inner) = &e {
                let _ = inner.print();
            }
            ExitCode::from(e.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
