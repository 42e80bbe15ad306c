//! `rctdesign` binary: exit 0 on success, 1 on usage errors, 2 on data or
//! positivity errors (with a structured JSON line on stderr).

mod args;
mod commands;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

fn main() {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help and version are successful exits
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{err}");
                std::process::exit(0);
            }
            eprint!("{err}");
            std::process::exit(1);
        }
    };
    if let Err(err) = commands::run(cli) {
        let payload = json!({
            "error": {
                "kind": err.kind(),
                "message": err.to_string(),
            }
        });
        eprintln!("{payload}");
        std::process::exit(2);
    }
}
