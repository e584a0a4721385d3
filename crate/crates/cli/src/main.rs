mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// 1 for I/O, 2 for bad input, 3 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<slicewise::Error>() {
            return match e {
                slicewise::Error::Io(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let hw = cli.hw.as_deref();
    let result = match &cli.command {
        Command::Ingest(a) => commands::ingest(hw, a),
        Command::Export(a) => commands::export(hw, a),
        Command::Roofline(a) => commands::roofline(hw, a),
        Command::Predict(a) => commands::predict(hw, a),
        Command::Concurrency(a) => commands::concurrency(hw, a),
        Command::Advise(a) => commands::advise_cmd(hw, a),
        Command::Eval(a) => commands::eval(hw, a),
        Command::Extrapolate(a) => commands::extrapolate(hw, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
