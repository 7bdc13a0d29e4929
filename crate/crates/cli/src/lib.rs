//! The `crce` command line: argument parsing, config layering, run
//! directories and the commands themselves.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

use cli::Cli;
use manifest::RunStatus;

/// Runs one invocation and returns the process exit code.
///
/// 0 on success, 1 on failure or partial failure, 2 on usage errors and
/// missing inputs.
pub fn run(cli: Cli) -> i32 {
    let json = cli.global.json;
    match commands::dispatch(&cli.global, cli.command) {
        Ok(out) => {
            if json {
                println!("{}", serde_json::json!({"status": out.status, "result": out.json}));
            } else if !out.human.is_empty() {
                println!("{}", out.human.trim_end());
            }
            match out.status {
                RunStatus::Ok => 0,
                RunStatus::Partial | RunStatus::Failed => 1,
            }
        }
        Err(e) => {
            if json {
                println!(
                    "{}",
                    serde_json::json!({"status": "error", "exit_code": e.exit_code(), "error": e.to_string()})
                );
            }
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
