//! Run configuration: per-subcommand key schemas, resolved from defaults, an
//! optional `key = value` file, the `ACTLENS_SEED` environment variable, and
//! command-line flags, in increasing priority.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use actlens::codec;
use clap::{Arg, ArgMatches, Command};

use crate::error::CliError;

pub const SEED_ENV: &str = "ACTLENS_SEED";

#[derive(Debug, Clone, Copy)]
pub enum Default {
    Value(&'static str),
    Required,
    /// No value unless given.
    Unset,
}

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: Default,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Default::Value(default),
        help,
    }
}

pub const fn required(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Default::Required,
        help,
    }
}

pub const fn optional(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Default::Unset,
        help,
    }
}

pub const OUT: Key = required("out", "run directory for all outputs");

/// Adds `--config` and one `--<key>` flag per schema entry.
pub fn command_for(name: &'static str, about: &'static str, keys: &[Key]) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value file; flags override it"),
    );
    for k in keys {
        let help = match k.default {
            Default::Value(v) => format!("{} [default: {v}]", k.help),
            _ => k.help.to_string(),
        };
        cmd = cmd.arg(Arg::new(k.name).long(k.name).value_name("VALUE").help(help));
    }
    cmd
}

/// Fully resolved key/value settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn resolve(keys: &[Key], matches: &ArgMatches) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for k in keys {
            if let Default::Value(v) = k.default {
                values.insert(k.name.to_string(), v.to_string());
            }
        }
        if let Some(path) = matches.get_one::<String>("config") {
            let file = codec::read_kv_file(Path::new(path)).map_err(|e| match e {
                actlens::Error::Io(io) => {
                    CliError::usage(format!("cannot read config {path}: {io}"))
                }
                other => CliError::usage(format!("config {path}: {other}")),
            })?;
            for (k, v) in file {
                if !keys.iter().any(|s| s.name == k) {
                    return Err(CliError::usage(format!("config {path}: unknown key '{k}'")));
                }
                values.insert(k, v);
            }
        }
        if keys.iter().any(|k| k.name == "seed") {
            if let Ok(seed) = std::env::var(SEED_ENV) {
                values.insert("seed".into(), seed);
            }
        }
        for k in keys {
            if let Some(v) = matches.get_one::<String>(k.name) {
                values.insert(k.name.to_string(), v.clone());
            }
        }
        for k in keys {
            if matches!(k.default, Default::Required) && !values.contains_key(k.name) {
                return Err(CliError::usage(format!(
                    "missing required key '{}'",
                    k.name
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn str(&self, key: &str) -> Result<&str, CliError> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::usage(format!("missing key '{key}'")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(key)?;
        raw.parse()
            .map_err(|e| CliError::usage(format!("invalid value '{raw}' for '{key}': {e}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.has(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.str(key)?))
    }

    /// Comma-separated paths.
    pub fn paths(&self, key: &str) -> Result<Vec<PathBuf>, CliError> {
        let list: Vec<PathBuf> = self
            .str(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect();
        if list.is_empty() {
            return Err(CliError::usage(format!("'{key}' lists no paths")));
        }
        Ok(list)
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        self.path(OUT.name)
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn to_text(&self) -> String {
        codec::format_kv(self.values.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }
}
