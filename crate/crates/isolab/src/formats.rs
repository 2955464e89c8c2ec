//! Text formats: embedding matrices and JSONL corpora.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use isolab_core::data::{Dataset, DatasetBuilder};
use isolab_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Renders a matrix as a `rows cols` line followed by one line per row of
/// space-separated values. Values use Rust's shortest round-trip notation,
/// so parsing the output recovers every bit.
pub fn embeddings_to_string(m: &Matrix) -> String {
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for r in 0..m.rows() {
        for (i, v) in m.row(r).iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(text: &str, path: &Path) -> Result<Matrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (line_no, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty embeddings file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path, line_no, "header must be two integers: rows cols"))?;
    let [rows, cols] = dims[..] else {
        return Err(Error::parse(
            path,
            line_no,
            "header must be two integers: rows cols",
        ));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (line_no, line) in lines {
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, line_no, format!("bad number: {e}")))?;
        if values.len() != cols {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {cols} values, found {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, line_no, "non-finite value"));
        }
        data.extend(values);
        seen += 1;
    }
    if seen != rows {
        return Err(Error::parse(
            path,
            line_no,
            format!("header declares {rows} rows, file has {seen}"),
        ));
    }
    Ok(Matrix::from_vec(rows, cols, data)?)
}

pub fn read_embeddings(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path)
}

pub fn write_embeddings(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, embeddings_to_string(m)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    text: String,
    label: String,
    domain: String,
}

pub fn parse_jsonl(text: &str, path: &Path) -> Result<Dataset> {
    let mut b = DatasetBuilder::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        b.push(&rec.text, &rec.label, &rec.domain)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
    }
    Ok(b.finish())
}

pub fn read_jsonl(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path)
}

pub fn dataset_to_jsonl(data: &Dataset) -> String {
    let mut out = String::new();
    for u in &data.utterances {
        let rec = Record {
            text: u.text.clone(),
            label: data.label_names[u.label].clone(),
            domain: data.domain_names[u.domain].clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, data: &Dataset) -> Result<()> {
    fs::write(path, dataset_to_jsonl(data)).map_err(|e| Error::io(path, e))
}

/// Reads a JSON config file; unknown fields are rejected by the target type.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
