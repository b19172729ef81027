//! Little-endian primitives shared by the binary checkpoint formats, plus the
//! flat `key = value` text format used for sidecars and run configs.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => {
            Error::Truncated(format!("unexpected end of file reading {what}"))
        }
        _ => Error::Io(e),
    })
}

pub(crate) fn read_magic<R: Read>(r: &mut R, magic: &[u8; 5]) -> Result<()> {
    let mut buf = [0u8; 5];
    read_exact(r, &mut buf, "magic")?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

macro_rules! le_reader {
    ($name:ident, $t:ty) => {
        pub(crate) fn $name<R: Read>(r: &mut R, what: &str) -> Result<$t> {
            let mut buf = [0u8; std::mem::size_of::<$t>()];
            read_exact(r, &mut buf, what)?;
            Ok(<$t>::from_le_bytes(buf))
        }
    };
}

le_reader!(read_u8, u8);
le_reader!(read_u16, u16);
le_reader!(read_u32, u32);
le_reader!(read_u64, u64);
le_reader!(read_i32, i32);

/// Reads `n` little-endian `f32`s, widening to `f64` and rejecting non-finite values.
pub(crate) fn read_f32_block<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes, what)?;
    let mut out = Vec::with_capacity(n);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(Error::Data(format!("{what}: entry {i} is not finite")));
        }
        out.push(f64::from(v));
    }
    Ok(out)
}

pub(crate) fn write_f32_block<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(xs.len() * 4);
    for &x in xs {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Fails unless the reader is exhausted.
pub(crate) fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format(format!(
            "{what}: trailing bytes after declared payload"
        ))),
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
/// Duplicate keys are rejected.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key '{k}'",
                lineno + 1
            )));
        }
    }
    Ok(out)
}

pub fn format_kv<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_kv(&std::fs::read_to_string(path)?)
}

pub fn write_kv_file(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    std::fs::write(
        path,
        format_kv(entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))),
    )?;
    Ok(())
}

/// `foo.bin` → `foo.bin.meta`
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}
