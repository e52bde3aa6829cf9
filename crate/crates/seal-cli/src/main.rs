//! Command-line front end for the staining and locking toolkit.
//!
//! Every subcommand reads a flat key=value configuration (file, `--set`
//! overrides, and direct flags), writes its artifacts plus a manifest
//! echoing the resolved configuration under `--out`, and exits 0 on
//! success, 2 on configuration errors, 3 on precondition violations,
//! and 4 on numeric failures. Seeds are explicit everywhere, so a rerun
//! with the same configuration reproduces every output byte for byte.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Arg, ArgAction, Command};
use seal_core::error::ErrorCategory;

fn build_cli() -> Command {
    let mut root = Command::new("seal")
        .about("Staining and locking toolkit for small neural networks")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in config::COMMANDS {
        let mut cmd = Command::new(spec.name)
            .about(spec.about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("Flat key=value config file"),
            )
            .arg(
                Arg::new("set")
                    .long("set")
                    .value_name("KEY=VALUE")
                    .action(ArgAction::Append)
                    .help("Config override; direct --key flags rank above it"),
            )
            .arg(
                Arg::new("out")
                    .long("out")
                    .value_name("DIR")
                    .default_value(".")
                    .help("Output directory (created if missing)"),
            );
        if spec.jobs {
            cmd = cmd.arg(
                Arg::new("jobs")
                    .long("jobs")
                    .value_name("N")
                    .help("Worker threads for the evaluation"),
            );
        }
        for p in spec.params {
            // Negative numbers must pass through as values.
            cmd = cmd.arg(
                Arg::new(p.key)
                    .long(p.key)
                    .value_name("VALUE")
                    .allow_hyphen_values(true)
                    .help(p.help),
            );
        }
        root = root.subcommand(cmd);
    }
    root
}

fn main() -> ExitCode {
    let matches = build_cli().get_matches();
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    match commands::run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Precondition => 3,
                ErrorCategory::Numeric => 4,
            })
        }
    }
}
