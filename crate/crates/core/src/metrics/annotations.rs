//! Tab-separated annotation files.
//!
//! Strong: `filename<TAB>onset<TAB>offset<TAB>label`, one event per line.
//! Weak:   `filename<TAB>label1,label2,...`, one clip per line (the label
//! field may be empty).

use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StrongRecord {
    pub file: String,
    pub onset: f64,
    pub offset: f64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeakRecord {
    pub file: String,
    pub labels: Vec<String>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn parse_strong(text: &str, origin: &Path) -> Result<Vec<StrongRecord>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(
                origin,
                lineno,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let time = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| parse_err(origin, lineno, format!("invalid {what} `{s}`")))
        };
        let onset = time(fields[1], "onset")?;
        let offset = time(fields[2], "offset")?;
        if onset >= offset {
            return Err(parse_err(
                origin,
                lineno,
                format!("onset {onset} is not before offset {offset}"),
            ));
        }
        let label = fields[3].trim();
        if label.is_empty() {
            return Err(parse_err(origin, lineno, "empty label"));
        }
        out.push(StrongRecord {
            file: fields[0].trim().to_string(),
            onset,
            offset,
            label: label.to_string(),
        });
    }
    Ok(out)
}

pub fn parse_weak(text: &str, origin: &Path) -> Result<Vec<WeakRecord>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let file = fields.next().unwrap_or("").trim();
        if file.is_empty() {
            return Err(parse_err(origin, idx + 1, "missing file name"));
        }
        let labels = fields.next().unwrap_or("");
        if fields.next().is_some() {
            return Err(parse_err(origin, idx + 1, "expected at most 2 tab-separated fields"));
        }
        out.push(WeakRecord {
            file: file.to_string(),
            labels: labels
                .split(',')
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        });
    }
    Ok(out)
}

pub fn read_strong_annotations(path: &Path) -> Result<Vec<StrongRecord>> {
    parse_strong(&std::fs::read_to_string(path)?, path)
}

pub fn read_weak_annotations(path: &Path) -> Result<Vec<WeakRecord>> {
    parse_weak(&std::fs::read_to_string(path)?, path)
}

pub fn write_strong_annotations<W: Write>(mut out: W, records: &[StrongRecord]) -> Result<()> {
    for r in records {
        writeln!(out, "{}\t{:.3}\t{:.3}\t{}", r.file, r.onset, r.offset, r.label)?;
    }
    Ok(())
}

pub fn write_weak_annotations<W: Write>(mut out: W, records: &[WeakRecord]) -> Result<()> {
    for r in records {
        writeln!(out, "{}\t{}", r.file, r.labels.join(","))?;
    }
    Ok(())
}
