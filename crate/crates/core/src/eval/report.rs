//! Report emission: one CSV per matrix plus a versioned JSON bundle.
//!
//! `report.json` has the shape
//!
//! ```text
//! {
//!   "schema": "ma2t-report",
//!   "version": 1,
//!   "matrices": [EvalMatrix, ...],
//!   "configs": { ... },              // free-form resolved configuration
//!   "seeds": [u64, ...],
//!   "inputs": [{"name": ..., "hash": ...}, ...],
//!   "plots": {"<name>.csv": "<csv text>", ...}
//! }
//! ```
//!
//! Input hashes are git blob hashes with SHA-256: `sha256("blob <len>\0" ++ bytes)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EvalMatrix;
use crate::{Error, Result};

pub const REPORT_SCHEMA: &str = "ma2t-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub name: String,
    pub hash: String,
}

impl InputHash {
    pub fn of_bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        Self { name: name.into(), hash: git_blob_hash(bytes) }
    }

    pub fn of_file(name: impl Into<String>, path: &Path) -> Result<Self> {
        Ok(Self::of_bytes(name, &std::fs::read(path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportBundle {
    pub schema: String,
    pub version: u32,
    pub matrices: Vec<EvalMatrix>,
    pub configs: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputHash>,
    #[serde(default)]
    pub plots: BTreeMap<String, String>,
}

impl ReportBundle {
    pub fn new(matrices: Vec<EvalMatrix>, configs: serde_json::Value, seeds: Vec<u64>, inputs: Vec<InputHash>) -> Self {
        Self { schema: REPORT_SCHEMA.into(), version: REPORT_VERSION, matrices, configs, seeds, inputs, plots: BTreeMap::new() }
    }
}

pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Parse and check a bundle: schema tag, version, a finite value in every
/// cell and unique matrix names.
pub fn validate_bundle(json: &str) -> Result<ReportBundle> {
    let bundle: ReportBundle = serde_json::from_str(json).map_err(|e| Error::format(format!("report bundle: {e}")))?;
    if bundle.schema != REPORT_SCHEMA {
        return Err(Error::format(format!("unknown report schema `{}`", bundle.schema)));
    }
    if bundle.version != REPORT_VERSION {
        return Err(Error::format(format!("unsupported report version {}", bundle.version)));
    }
    let mut names = std::collections::HashSet::new();
    for m in &bundle.matrices {
        if !names.insert(&m.name) {
            return Err(Error::format(format!("duplicate matrix `{}`", m.name)));
        }
        if m.clean.label != "Clean" {
            return Err(Error::format(format!("matrix `{}` has no Clean row", m.name)));
        }
        for row in m.all_rows() {
            for c in row.metrics.cells() {
                if !(c.mean.is_finite() && c.std.is_finite() && c.std >= 0.0) {
                    return Err(Error::format(format!("matrix `{}` row `{}` has a non-finite cell", m.name, row.label)));
                }
            }
        }
    }
    for i in &bundle.inputs {
        if i.hash.len() != 64 || !i.hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::format(format!("input `{}` has a malformed hash", i.name)));
        }
    }
    Ok(bundle)
}

/// Write `<matrix>.csv` for every matrix, plot-data CSVs and `report.json`
/// into `dir`. Returns the written paths.
pub fn emit_report(dir: &Path, bundle: &ReportBundle) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for m in &bundle.matrices {
        let path = dir.join(format!("{}.csv", m.name));
        let mut bytes = Vec::new();
        m.write_csv(&mut bytes)?;
        std::fs::write(&path, bytes)?;
        written.push(path);
    }
    for (name, text) in &bundle.plots {
        let path = dir.join(name);
        std::fs::write(&path, text)?;
        written.push(path);
    }
    let json = serde_json::to_string_pretty(bundle)?;
    validate_bundle(&json)?;
    let path = dir.join("report.json");
    std::fs::write(&path, json + "\n")?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_of_empty_input() {
        // sha256("blob 0\0")
        assert_eq!(git_blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn validator_rejects_foreign_schema() {
        let b = ReportBundle::new(Vec::new(), serde_json::json!({}), vec![1], Vec::new());
        let mut json: serde_json::Value = serde_json::to_value(&b).unwrap();
        validate_bundle(&json.to_string()).unwrap();
        json["schema"] = "other".into();
        assert!(validate_bundle(&json.to_string()).is_err());
        json["schema"] = REPORT_SCHEMA.into();
        json["version"] = 2.into();
        assert!(validate_bundle(&json.to_string()).is_err());
    }
}
