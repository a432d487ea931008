//! Atomic JSONL and CSV report files.

use std::path::{Path, PathBuf};

use serde::Serialize;

use hoi_core::archive::write_atomic;

use crate::error::{CliError, CliResult};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Root of every run directory: `$HOI_OUT`, or `runs` when unset.
pub fn out_root() -> PathBuf {
    std::env::var_os("HOI_OUT")
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::Other(e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Other(e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Other(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Fixed-precision rendering used in tables.
pub fn fmt_metric(v: f64) -> String {
    format!("{v:.4}")
}
