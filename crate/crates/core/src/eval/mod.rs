//! Robustness matrices: white-box and transfer attacks, natural corruptions,
//! and report emission.

mod blackbox;
mod corruption;
mod report;
mod whitebox;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use blackbox::{default_transfer_attacks, evaluate_blackbox, Surrogate};
pub use corruption::{apply_corruption, evaluate_corruption, CorruptionKind, CorruptionSpec, SEVERITIES};
pub use report::{emit_report, git_blob_hash, validate_bundle, InputHash, ReportBundle, REPORT_SCHEMA, REPORT_VERSION};
pub use whitebox::{default_whitebox_attacks, evaluate_whitebox, image_attacks, whitebox_rows};

use crate::attacks::{AttackConfig, PerturbationSet};
use crate::pipeline::{PerModule, Pipeline};
use crate::tensor::Tensor;
use crate::task::dataset::{Batch, Dataset};
use crate::task::metrics::{sample_metrics, SampleMetrics};
use crate::trainer::Checkpoint;
use crate::Result;

/// Samples per evaluation batch.
pub const EVAL_BATCH: usize = 50;

pub const METRIC_NAMES: [&str; 5] = ["avg_l2", "iou_map", "min_ade", "iou_occ", "det_err"];

/// Mean and population standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    /// Number of values pooled; samples without obstacles do not count
    /// towards min_ade and det_err.
    pub count: usize,
}

impl Cell {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0, count: 0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), count: values.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub avg_l2: Cell,
    pub iou_map: Cell,
    pub min_ade: Cell,
    pub iou_occ: Cell,
    pub det_err: Cell,
}

impl Metrics {
    pub fn from_samples(samples: &[SampleMetrics]) -> Self {
        let col = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| Cell::from_values(&samples.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            avg_l2: col(&|m| Some(m.avg_l2)),
            iou_map: col(&|m| Some(m.iou_map)),
            min_ade: col(&|m| m.min_ade.valid.then_some(m.min_ade.value)),
            iou_occ: col(&|m| Some(m.iou_occ)),
            det_err: col(&|m| m.det_err.valid.then_some(m.det_err.value)),
        }
    }

    pub fn cells(&self) -> [&Cell; 5] {
        [&self.avg_l2, &self.iou_map, &self.min_ade, &self.iou_occ, &self.det_err]
    }
}

/// What produced a row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowSource {
    Clean,
    Attack { attack: AttackConfig },
    Transfer { surrogate: String, attack: AttackConfig },
    Corruption { spec: CorruptionSpec },
}

/// Degradation of one candidate attack considered during strongest-attack selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: String,
    pub avg_l2_degradation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub source: RowSource,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub victim: String,
    /// Content hash of the victim's serialized checkpoint.
    pub victim_hash: String,
    pub dataset: String,
    pub samples: usize,
    pub restarts: usize,
    pub seeds: Vec<u64>,
}

/// Rows of one robustness table. The clean reference is kept apart from
/// the perturbed rows and is always emitted first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub name: String,
    pub clean: Row,
    pub rows: Vec<Row>,
    pub metadata: Metadata,
}

impl EvalMatrix {
    /// Clean row followed by the perturbed rows.
    pub fn all_rows(&self) -> impl Iterator<Item = &Row> {
        std::iter::once(&self.clean).chain(&self.rows)
    }

    /// Mean avg_l2 over the perturbed rows.
    pub fn summary_avg_l2(&self) -> f64 {
        self.rows.iter().map(|r| r.metrics.avg_l2.mean).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn row(&self, label: &str) -> Option<&Row> {
        self.all_rows().find(|r| r.label == label)
    }

    /// Increase of mean avg_l2 over the clean row.
    pub fn degradation(&self, row: &Row) -> f64 {
        row.metrics.avg_l2.mean - self.clean.metrics.avg_l2.mean
    }

    /// CSV with one line per row: label, then mean, std and count for each metric.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let mut header = vec!["row".to_string()];
        for m in METRIC_NAMES {
            header.extend([format!("{m}_mean"), format!("{m}_std"), format!("{m}_count")]);
        }
        writeln!(w, "{}", header.join(","))?;
        for row in self.all_rows() {
            let mut cols = vec![csv_field(&row.label)];
            for c in row.metrics.cells() {
                cols.extend([format!("{}", c.mean), format!("{}", c.std), c.count.to_string()]);
            }
            writeln!(w, "{}", cols.join(","))?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// SHA-256 over the bytes of a serialized checkpoint.
pub fn checkpoint_hash(c: &Checkpoint) -> String {
    let mut bytes = Vec::new();
    c.write_to(&mut bytes).expect("in-memory write");
    hex::encode(Sha256::digest(&bytes))
}

/// Short content identifier of a dataset split.
pub fn dataset_id(d: &Dataset) -> String {
    let mut bytes = Vec::new();
    d.write_to(&mut bytes).expect("in-memory write");
    let h = hex::encode(Sha256::digest(&bytes));
    format!("{}-n{}-{}", serde_json::to_value(d.split).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(), d.len(), &h[..12])
}

/// Per-sample metrics over every batch, with head outputs produced by `heads_for(batch_index, batch)`.
pub(crate) fn collect_with<F>(data: &Dataset, heads_for: F) -> Result<Vec<SampleMetrics>>
where
    F: Fn(usize, &Batch) -> Result<PerModule<Tensor>> + Sync,
{
    let batches = data.batches(EVAL_BATCH)?;
    let per_batch: Vec<Result<Vec<SampleMetrics>>> = batches
        .par_iter()
        .enumerate()
        .map(|(i, b)| Ok(sample_metrics(&heads_for(i, b)?, &b.labels)))
        .collect();
    let mut out = Vec::with_capacity(data.len());
    for r in per_batch {
        out.extend(r?);
    }
    Ok(out)
}

/// Per-sample metrics of `pipeline` with the noise produced by `noise_for(batch_index, batch)`.
pub(crate) fn collect_metrics<F>(pipeline: &Pipeline, data: &Dataset, noise_for: F) -> Result<Vec<SampleMetrics>>
where
    F: Fn(usize, &Batch) -> Result<Option<PerturbationSet>> + Sync,
{
    collect_with(data, |i, b| pipeline.predict(&b.obs, noise_for(i, b)?.as_ref()))
}

pub(crate) fn clean_row(pipeline: &Pipeline, data: &Dataset) -> Result<Row> {
    let samples = collect_metrics(pipeline, data, |_, _| Ok(None))?;
    Ok(Row { label: "Clean".into(), source: RowSource::Clean, metrics: Metrics::from_samples(&samples), candidates: Vec::new() })
}

pub(crate) fn require_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(crate::Error::contract("evaluation needs at least one seed"));
    }
    Ok(())
}

pub(crate) fn metadata(victim: &Checkpoint, data: &Dataset, restarts: usize, seeds: &[u64]) -> Metadata {
    Metadata {
        victim: victim.id(),
        victim_hash: checkpoint_hash(victim),
        dataset: dataset_id(data),
        samples: data.len(),
        restarts,
        seeds: seeds.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_uses_population_std() {
        let c = Cell::from_values(&[1.0, 3.0]);
        assert_eq!((c.mean, c.std, c.count), (2.0, 1.0, 2));
        assert_eq!(Cell::from_values(&[]).count, 0);
    }

    #[test]
    fn csv_quotes_commas() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
