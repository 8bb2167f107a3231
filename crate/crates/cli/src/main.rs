use std::process::ExitCode;

use clap::Parser;
use fusex_cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let fusex_cli::CliError::GradcheckFailed { report, .. } = &e {
                println!("{report}");
            }
            eprintln!("fusex: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
