//! Command-line front end. Every subcommand resolves its settings, writes
//! them to `resolved.conf` in the run directory, appends to `run.log`, and
//! places all outputs beside them.

pub mod commands;
pub mod config;
pub mod error;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Command;

use crate::commands::SUBCOMMANDS;
use crate::config::{command_for, RunConfig};
use crate::error::CliError;

pub fn cli() -> Command {
    let mut cmd = Command::new("actlens")
        .about("Sparse features, probes and steering on recorded activations")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for s in SUBCOMMANDS {
        cmd = cmd.subcommand(command_for(s.name, s.about, s.keys));
    }
    cmd
}

fn log_line(path: &std::path::Path, line: &str) -> Result<(), CliError> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{secs} {line}")?;
    Ok(())
}

/// Parses `args` (including the program name) and runs one subcommand.
/// Returns the summary line on success.
pub fn run<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = cli()
        .try_get_matches_from(args)
        .map_err(|e| match e.kind() {
            clap::error::ErrorKind::DisplayHelp
            | clap::error::ErrorKind::DisplayVersion
            | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                CliError::help(e.to_string())
            }
            _ => CliError::usage(
                e.to_string()
                    .lines()
                    .next()
                    .unwrap_or("invalid arguments")
                    .trim_start_matches("error: "),
            ),
        })?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let spec = SUBCOMMANDS
        .iter()
        .find(|s| s.name == name)
        .expect("registered subcommand");
    let cfg = RunConfig::resolve(spec.keys, sub)?;
    let out = cfg.out_dir()?;
    fs::create_dir_all(&out)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", out.display())))?;
    fs::write(out.join("resolved.conf"), cfg.to_text())?;
    let log = out.join("run.log");
    log_line(&log, &format!("start {name}"))?;
    match (spec.run)(&cfg, &out) {
        Ok(summary) => {
            log_line(&log, &format!("done {name}: {summary}"))?;
            Ok(summary)
        }
        Err(e) => {
            let _ = log_line(&log, &format!("failed {name}: {e}"));
            Err(e)
        }
    }
}
