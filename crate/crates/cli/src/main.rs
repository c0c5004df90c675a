use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use crankhil_cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            // a closed pipe downstream is not our failure
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
