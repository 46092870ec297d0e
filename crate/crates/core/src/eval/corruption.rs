//! Simplified natural corruptions of the 4-channel raster.
//!
//! | kind           | severity 1..5                         | effect                                          |
//! |----------------|---------------------------------------|-------------------------------------------------|
//! | contrast       | c = 0.8, 0.6, 0.45, 0.3, 0.2          | `0.5 + c (x - 0.5)`                             |
//! | gaussian_noise | sigma = 0.04, 0.08, 0.12, 0.18, 0.26  | `x + N(0, sigma)`                               |
//! | shot_noise     | lambda = 60, 25, 12, 5, 3             | `Poisson(lambda x) / lambda`                    |
//! | snow           | k = 2, 4, 6, 8, 12                    | k vertical streaks of 4 cells set to 1, all channels |
//! | frost          | w = 0.15, 0.25, 0.35, 0.45, 0.55      | `(1 - w) x + w T`, T a bilinear 5x5 value-noise texture |
//! | spatter        | k = 2, 4, 6, 10, 14                   | k 2x2 blobs set to 1 on the corridor and ego channels |
//!
//! Every output is clamped to `[0, 1]`. Random draws depend on the spec's
//! seed, the kind and the observation, not on the severity: a higher
//! severity reuses the lower severity's streaks, blobs, noise and texture.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{clean_row, collect_with, metadata, EvalMatrix, Metrics, Row, RowSource};
use crate::rng::{mix_seed, SeededRng, Stream};
use crate::task::dataset::Dataset;
use crate::task::model::check_architecture;
use crate::task::raster::CHANNELS;
use crate::task::scenario::GRID;
use crate::tensor::Tensor;
use crate::trainer::Checkpoint;
use crate::{Error, Result};

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];
const CONTRAST: [f64; 5] = [0.8, 0.6, 0.45, 0.3, 0.2];
const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const SHOT_LAMBDA: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const SNOW_STREAKS: [usize; 5] = [2, 4, 6, 8, 12];
const SNOW_LENGTH: usize = 4;
const FROST_WEIGHT: [f64; 5] = [0.15, 0.25, 0.35, 0.45, 0.55];
const FROST_LATTICE: usize = 5;
const SPATTER_BLOBS: [usize; 5] = [2, 4, 6, 10, 14];
/// Channels spatter paints on: everything except the two obstacle channels.
const SPATTER_CHANNELS: [usize; 2] = [0, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Contrast,
    Frost,
    Snow,
    GaussianNoise,
    ShotNoise,
    Spatter,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::Contrast,
        CorruptionKind::Frost,
        CorruptionKind::Snow,
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::Spatter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Frost => "frost",
            CorruptionKind::Snow => "snow",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::Spatter => "spatter",
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::contract(format!("unknown corruption `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1..=5.
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::config("eval.severity", format!("must lie in 1..=5, got {severity}")));
        }
        Ok(Self { kind, severity, seed })
    }

    pub fn label(&self) -> String {
        format!("{} s{}", self.kind.name(), self.severity)
    }
}

/// Contrast map `0.5 + c (x - 0.5)`.
pub(crate) fn contrast(x: f64, c: f64) -> f64 {
    0.5 + c * (x - 0.5)
}

fn obs_seed(spec: &CorruptionSpec, obs: &[f64]) -> u64 {
    let mut h = Sha256::new();
    for v in obs {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    let obs_hash = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let kind = CorruptionKind::ALL.iter().position(|&k| k == spec.kind).expect("listed") as u64;
    mix_seed(mix_seed(spec.seed, kind), obs_hash)
}

/// Bilinear interpolation of a 5x5 lattice of uniform values over the grid.
fn value_noise(rng: &mut SeededRng) -> Vec<f64> {
    let lattice: Vec<f64> = (0..FROST_LATTICE * FROST_LATTICE).map(|_| rng.unit()).collect();
    let scale = (FROST_LATTICE - 1) as f64 / (GRID - 1) as f64;
    let mut out = Vec::with_capacity(GRID * GRID);
    for y in 0..GRID {
        for x in 0..GRID {
            let (fx, fy) = (x as f64 * scale, y as f64 * scale);
            let (x0, y0) = ((fx as usize).min(FROST_LATTICE - 2), (fy as usize).min(FROST_LATTICE - 2));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let at = |i: usize, j: usize| lattice[j * FROST_LATTICE + i];
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn corrupt_one(x: &mut [f64], spec: &CorruptionSpec) {
    let s = spec.severity as usize - 1;
    let mut rng = SeededRng::new(obs_seed(spec, x), Stream::Corruption);
    let plane = GRID * GRID;
    match spec.kind {
        CorruptionKind::Contrast => x.iter_mut().for_each(|v| *v = contrast(*v, CONTRAST[s])),
        CorruptionKind::GaussianNoise => {
            for v in x.iter_mut() {
                *v += GAUSSIAN_SIGMA[s] * rng.standard_normal();
            }
        }
        CorruptionKind::ShotNoise => {
            let lambda = SHOT_LAMBDA[s];
            for v in x.iter_mut() {
                *v = rng.poisson(lambda * v.clamp(0.0, 1.0)) as f64 / lambda;
            }
        }
        CorruptionKind::Snow => {
            let max = SNOW_STREAKS[SNOW_STREAKS.len() - 1];
            let streaks: Vec<(usize, usize)> =
                (0..max).map(|_| (rng.below(GRID as u64) as usize, rng.below(GRID as u64) as usize)).collect();
            for &(cx, cy) in &streaks[..SNOW_STREAKS[s]] {
                for y in cy..(cy + SNOW_LENGTH).min(GRID) {
                    for c in 0..CHANNELS {
                        x[c * plane + y * GRID + cx] = 1.0;
                    }
                }
            }
        }
        CorruptionKind::Frost => {
            let texture = value_noise(&mut rng);
            let w = FROST_WEIGHT[s];
            for c in 0..CHANNELS {
                for (v, t) in x[c * plane..(c + 1) * plane].iter_mut().zip(&texture) {
                    *v = (1.0 - w) * *v + w * t;
                }
            }
        }
        CorruptionKind::Spatter => {
            let max = SPATTER_BLOBS[SPATTER_BLOBS.len() - 1];
            let blobs: Vec<(usize, usize)> =
                (0..max).map(|_| (rng.below(GRID as u64 - 1) as usize, rng.below(GRID as u64 - 1) as usize)).collect();
            for &(bx, by) in &blobs[..SPATTER_BLOBS[s]] {
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    for c in SPATTER_CHANNELS {
                        x[c * plane + (by + dy) * GRID + bx + dx] = 1.0;
                    }
                }
            }
        }
    }
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Corrupt every observation of a `[B, 4, 32, 32]` (or single `[4, 32, 32]`) tensor.
pub fn apply_corruption(obs: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    let per = CHANNELS * GRID * GRID;
    if obs.len() % per != 0 || obs.shape().iter().rev().take(3).product::<usize>() != per {
        return Err(Error::contract(format!("corruption expects rasters of shape [.., 4, 32, 32], got {:?}", obs.shape())));
    }
    let mut out = obs.clone();
    for chunk in out.data_mut().chunks_mut(per) {
        corrupt_one(chunk, spec);
    }
    Ok(out)
}

/// The 6 x 5 corruption grid, pooling samples over `seeds`.
pub fn evaluate_corruption(victim: &Checkpoint, data: &Dataset, seeds: &[u64]) -> Result<EvalMatrix> {
    super::require_seeds(seeds)?;
    check_architecture(&victim.pipeline)?;
    let pipeline = &victim.pipeline;
    let mut rows = Vec::new();
    for kind in CorruptionKind::ALL {
        for severity in SEVERITIES {
            let mut samples = Vec::new();
            for &seed in seeds {
                let spec = CorruptionSpec::new(kind, severity, seed)?;
                samples.extend(collect_with(data, |_, b| pipeline.predict(&apply_corruption(&b.obs, &spec)?, None))?);
            }
            let spec = CorruptionSpec::new(kind, severity, seeds.first().copied().unwrap_or(0))?;
            rows.push(Row {
                label: spec.label(),
                source: RowSource::Corruption { spec },
                metrics: Metrics::from_samples(&samples),
                candidates: Vec::new(),
            });
        }
    }
    Ok(EvalMatrix { name: "corruption".into(), clean: clean_row(pipeline, data)?, rows, metadata: metadata(victim, data, 0, seeds) })
}
