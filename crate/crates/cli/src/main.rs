//! `mda`: command-line driver. Results go to stdout (JSON unless a text
//! table is the natural form); failures go to stderr as one JSON line.
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod cli;
mod run;

use std::path::Path;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

use cli::{Cli, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mda_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    fn code(&self) -> &'static str {
        match self {
            Self::Core(e) => e.code(),
            Self::Usage(_) => "usage",
            Self::Io { .. } => "io",
            Self::Json(_) => "json",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn report_error(code: &str, message: &str) {
    eprintln!("{}", json!({"error": code, "message": message}));
}

fn execute(command: Command) -> Result<(), CliError> {
    let print = |v: serde_json::Value| println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
    match command {
        Command::GenData(a) => print(run::gen_data(a)?),
        Command::TrainBackbone(a) => print(run::train_backbone_cmd(a)?),
        Command::TrainDomain(a) => print(run::train_domain_cmd(a)?),
        Command::Eval(a) => print(run::eval_cmd(a)?),
        Command::Sweep(a) => {
            let json = a.json;
            let (value, text) = run::sweep_cmd(a)?;
            if json {
                print(value)
            } else {
                print!("{text}")
            }
        }
        Command::Params(a) => {
            let json = a.json;
            let (value, text) = run::params_cmd(a)?;
            if json {
                print(value)
            } else {
                println!("{text}")
            }
        }
        Command::Ckpt(c) => match run::ckpt_cmd(c)? {
            (_, Some(text)) => println!("{text}"),
            (value, None) => print(value),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let body = rendered.split("\n\nUsage:").next().unwrap_or_default();
            let message = body.trim_start_matches("error: ").split_whitespace().collect::<Vec<_>>().join(" ");
            report_error("usage", &message);
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.code(), &e.to_string());
            ExitCode::from(e.exit_code())
        }
    }
}
