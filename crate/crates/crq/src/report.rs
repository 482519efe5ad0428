//! Versioned JSON reports with model and config hashes.
//!
//! Reports are rendered from `serde_json::Value`, whose maps keep keys
//! sorted, so equal inputs always give equal bytes.

use crate::model::ManifoldModel;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot serialize report: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("cannot encode csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// One pass/fail decision inside a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    pub model: String,
    pub model_hash: String,
    pub config_hash: String,
    pub config: Value,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub body: Value,
}

/// Hex SHA-256 of the canonical JSON of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String, ReportError> {
    let canonical = serde_json::to_string(&serde_json::to_value(config)?)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

impl Report {
    pub fn new<C: Serialize, B: Serialize>(
        command: &str,
        model: &ManifoldModel,
        config: &C,
        checks: Vec<Check>,
        body: &B,
    ) -> Result<Self, ReportError> {
        Ok(Self {
            schema: crate::SCHEMA_VERSION.to_string(),
            command: command.to_string(),
            model: model.name.clone(),
            model_hash: model.hash(),
            config_hash: config_hash(config)?,
            config: serde_json::to_value(config)?,
            passed: checks.iter().all(|c| c.passed),
            checks,
            body: serde_json::to_value(body)?,
        })
    }

    /// Pretty JSON with sorted keys and a trailing newline.
    pub fn to_json(&self) -> Result<String, ReportError> {
        let mut text = serde_json::to_string_pretty(&serde_json::to_value(self)?)?;
        text.push('\n');
        Ok(text)
    }

    /// Writes `<dir>/<command>.json` and returns the path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, ReportError> {
        let path = dir.join(format!("{}.json", self.command));
        write_text(&path, &self.to_json()?)?;
        Ok(path)
    }
}

/// Creates parent directories and writes `text`.
pub fn write_text(path: &Path, text: &str) -> Result<(), ReportError> {
    let io = |source| ReportError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}

/// Writes `rows` as CSV with a header taken from the field names.
pub fn write_rows<'a, T: Serialize + 'a>(path: &Path, rows: impl IntoIterator<Item = &'a T>) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    write_text(path, &String::from_utf8_lossy(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn report_bytes_are_canonical() {
        let model = ManifoldModel::bundled("split_n3").unwrap();
        let a = Report::new("x", &model, &json!({"b": 1, "a": [1.5, 2]}), vec![Check::new("c", true, "")], &json!({"z": 0, "y": 1})).unwrap();
        let b = Report::new("x", &model, &json!({"a": [1.5, 2], "b": 1}), vec![Check::new("c", true, "")], &json!({"y": 1, "z": 0})).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.config_hash, b.config_hash);
        assert!(a.passed);
        let text = a.to_json().unwrap();
        assert!(text.find("\"body\"").unwrap() < text.find("\"checks\"").unwrap());
    }

    #[test]
    fn any_failed_check_fails_the_report() {
        let model = ManifoldModel::bundled("split_n3").unwrap();
        let checks = vec![Check::new("a", true, ""), Check::new("b", false, "too large")];
        let r = Report::new("x", &model, &json!({}), checks, &json!(null)).unwrap();
        assert!(!r.passed);
        assert_ne!(config_hash(&json!({"seed": 1})).unwrap(), config_hash(&json!({"seed": 2})).unwrap());
    }
}
