//! Helpers for driving the `actlens` binary from tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_actlens")
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    fn from(out: Output) -> Self {
        Self {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }

    /// The category tag of the single error line, e.g. `data`.
    pub fn category(&self) -> Option<String> {
        let line = self.stderr.lines().find(|l| l.starts_with("error["))?;
        Some(line["error[".len()..line.find(']')?].to_string())
    }
}

pub fn actlens<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    Run::from(
        Command::new(bin())
            .args(args)
            .env_remove("ACTLENS_SEED")
            .env("RUST_LOG", "error")
            .output()
            .expect("spawn actlens"),
    )
}

/// Runs and panics with the captured stderr unless the exit code is 0.
pub fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> String {
    let r = actlens(args);
    assert_eq!(r.code, 0, "actlens failed: {}", r.stderr);
    r.stdout
}

/// Every file in `dir` except the run log, keyed by name.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().into_owned();
        if name != "run.log" && e.file_type().unwrap().is_file() {
            files.insert(name, fs::read(e.path()).unwrap());
        }
    }
    files
}

pub fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

/// Small dictionary shard and a class shard under `root`.
pub struct Shards {
    pub dictionary: PathBuf,
    pub classes: PathBuf,
}

pub fn make_shards(root: &Path) -> Shards {
    let dict_dir = root.join("dict");
    ok(&[
        "gen-synth",
        "--out",
        &p(&dict_dir),
        "--d-model",
        "16",
        "--n-features",
        "8",
        "--k",
        "2",
        "--rows",
        "2000",
        "--seed",
        "3",
    ]);
    let cls_dir = root.join("cls");
    ok(&[
        "gen-synth",
        "--config",
        &p(&fixture("classes.conf")),
        "--out",
        &p(&cls_dir),
    ]);
    Shards {
        dictionary: dict_dir.join("shard.acts"),
        classes: cls_dir.join("shard.acts"),
    }
}

/// Parses a numeric CSV with a header into column name → values.
pub fn read_numeric_csv(text: &str) -> BTreeMap<String, Vec<f64>> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap()
        .split(',')
        .map(str::to_string)
        .collect();
    let mut cols: BTreeMap<String, Vec<f64>> =
        header.iter().map(|h| (h.clone(), Vec::new())).collect();
    for line in lines.filter(|l| !l.is_empty()) {
        for (h, v) in header.iter().zip(line.split(',')) {
            cols.get_mut(h).unwrap().push(v.parse().unwrap());
        }
    }
    cols
}
