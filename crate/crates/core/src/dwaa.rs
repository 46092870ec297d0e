//! Dynamic loss-weight adaptation across the five modules.
//!
//! Every `update_period` batches the trainer feeds the window's mean
//! per-module losses. Once two windows are recorded:
//!
//! ```text
//! R_j     = min(L_j(t-1) / max(L_j(t-2), 1e-12), 1e100)
//! gamma_j = exp(clip((R_j - mean R) / std R, -10, 10))   (gamma = 1 if std R < 1e-8)
//! alpha_j = N gamma_j / sum_k gamma_k
//! W_j    <- r W_j + (1 - r) alpha_j
//! ```
//!
//! `std` is the population standard deviation over modules. Modules whose
//! loss falls slowest get the largest weight.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pipeline::{ModuleId, PerModule};
use crate::{Error, Result};

pub const N_MODULES: usize = 5;
pub const DEFAULT_DECAY: f64 = 0.2;
pub const DEFAULT_UPDATE_PERIOD: usize = 100;
pub const SIGMA_FLOOR: f64 = 1e-8;
pub const Z_CLIP: f64 = 10.0;
const DENOMINATOR_FLOOR: f64 = 1e-12;
/// Keeps the mean and variance of the ratios finite.
const RATIO_CAP: f64 = 1e100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DwaaConfig {
    pub enabled: bool,
    pub r: f64,
    pub update_period: usize,
}

impl Default for DwaaConfig {
    fn default() -> Self {
        Self { enabled: true, r: DEFAULT_DECAY, update_period: DEFAULT_UPDATE_PERIOD }
    }
}

impl DwaaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.r) {
            return Err(Error::config("dwaa.r", format!("must lie in [0, 1), got {}", self.r)));
        }
        if self.update_period == 0 {
            return Err(Error::config("dwaa.update_period", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioVector {
    pub ratios: PerModule<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwaaState {
    pub weights: PerModule<f64>,
    /// Most recent window mean, `L(t-1)`.
    pub last: Option<PerModule<f64>>,
    /// The window before it, `L(t-2)`.
    pub previous: Option<PerModule<f64>>,
    pub r: f64,
    pub update_period: usize,
    /// Number of weight updates applied.
    pub t: usize,
}

impl DwaaState {
    pub fn new(r: f64, update_period: usize) -> Self {
        Self { weights: PerModule::ones(), last: None, previous: None, r, update_period, t: 0 }
    }

    pub fn from_config(cfg: &DwaaConfig) -> Self {
        Self::new(cfg.r, cfg.update_period)
    }

    /// Shift the loss history and store a new window mean.
    pub fn record_window(&mut self, means: PerModule<f64>) -> Result<()> {
        for (id, &v) in means.iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::numeric(format!("window mean loss for {id} is {v}")));
            }
        }
        self.previous = self.last.replace(means);
        Ok(())
    }

    /// `None` until two windows have been recorded.
    pub fn compute_ratios(&self) -> Option<RatioVector> {
        let (last, prev) = (self.last.as_ref()?, self.previous.as_ref()?);
        let ratios = PerModule::from_fn(|id| (last[id] / prev[id].max(DENOMINATOR_FLOOR)).min(RATIO_CAP));
        let mean = ratios.sum() / N_MODULES as f64;
        let var = ratios.values().map(|r| (r - mean).powi(2)).sum::<f64>() / N_MODULES as f64;
        Some(RatioVector { ratios, mean, std: var.sqrt() })
    }

    pub fn update_weights(&mut self, alphas: &PerModule<f64>) {
        let r = self.r;
        self.weights = PerModule::from_fn(|id| r * self.weights[id] + (1.0 - r) * alphas[id]);
        self.t += 1;
    }

    /// One full window step: record, then update the weights if ratios are available.
    /// Returns whether the weights changed.
    pub fn step(&mut self, means: PerModule<f64>) -> Result<bool> {
        self.record_window(means)?;
        match self.compute_ratios() {
            Some(ratios) => {
                self.update_weights(&compute_alphas(&ratios));
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Weights for the next batches; all ones until the first update.
    pub fn current_weights(&self) -> PerModule<f64> {
        self.weights
    }
}

pub fn compute_alphas(ratios: &RatioVector) -> PerModule<f64> {
    let gamma = if ratios.std < SIGMA_FLOOR {
        PerModule([1.0; N_MODULES])
    } else {
        ratios.ratios.map(|&r| ((r - ratios.mean) / ratios.std).clamp(-Z_CLIP, Z_CLIP).exp())
    };
    let total = gamma.sum();
    gamma.map(|g| N_MODULES as f64 * g / total)
}

/// Accumulates per-batch module losses into window means.
#[derive(Debug, Clone, Default)]
pub struct WindowAccumulator {
    sums: [f64; N_MODULES],
    count: usize,
}

impl WindowAccumulator {
    pub fn push(&mut self, losses: &PerModule<f64>) {
        for id in ModuleId::ALL {
            self.sums[id.index()] += losses[id];
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean over the pushed batches, resetting the window.
    pub fn take_mean(&mut self) -> Option<PerModule<f64>> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let mean = PerModule::from_fn(|id| self.sums[id.index()] / n);
        *self = Self::default();
        Some(mean)
    }
}

/// Writes `update_index,W_Track,W_Map,W_Motion,W_Occ,W_Plan` rows.
pub fn write_trajectory_csv(path: &Path, trajectory: &[(usize, PerModule<f64>)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "update_index,W_Track,W_Map,W_Motion,W_Occ,W_Plan")?;
    for (i, w) in trajectory {
        let cols: Vec<String> = w.values().map(|v| format!("{v}")).collect();
        writeln!(f, "{i},{}", cols.join(","))?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_with(last: [f64; 5], prev: [f64; 5]) -> DwaaState {
        let mut s = DwaaState::new(0.2, 100);
        s.record_window(PerModule(prev)).unwrap();
        s.record_window(PerModule(last)).unwrap();
        s
    }

    #[test]
    fn warmup_until_two_windows() {
        let mut s = DwaaState::new(0.2, 100);
        assert_eq!(s.current_weights().0, [1.0; 5]);
        assert!(!s.step(PerModule([1.0, 2.0, 3.0, 4.0, 5.0])).unwrap());
        assert!(s.compute_ratios().is_none());
        assert_eq!(s.current_weights().0, [1.0; 5]);
    }

    #[test]
    fn ratio_hand_cases() {
        let r = state_with([2.0; 5], [2.0; 5]).compute_ratios().unwrap();
        assert_eq!(r.ratios.0, [1.0; 5]);
        assert_eq!(r.std, 0.0);
        let r = state_with([1.0, 2.0, 3.0, 4.0, 5.0], [1.0; 5]).compute_ratios().unwrap();
        assert_eq!(r.ratios.0, [1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!((r.mean - 3.0).abs() < 1e-15);
        assert!((r.std - 2f64.sqrt()).abs() < 1e-15);
        let r = state_with([1.0; 5], [0.0, 1.0, 1.0, 1.0, 1.0]).compute_ratios().unwrap();
        assert_eq!(r.ratios[ModuleId::Track], 1e12);
    }

    #[test]
    fn alpha_hand_evaluation() {
        let r = state_with([1.0, 2.0, 3.0, 4.0, 5.0], [1.0; 5]).compute_ratios().unwrap();
        let a = compute_alphas(&r);
        let s2 = 2f64.sqrt();
        let z = [-s2, -1.0 / s2, 0.0, 1.0 / s2, s2];
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let total: f64 = e.iter().sum();
        for (i, ei) in e.iter().enumerate() {
            assert!((a.0[i] - 5.0 * ei / total).abs() < 1e-12);
        }
        assert!((a.sum() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn equal_ratios_give_unit_alphas() {
        let r = state_with([3.0; 5], [1.5; 5]).compute_ratios().unwrap();
        assert_eq!(compute_alphas(&r).0, [1.0; 5]);
    }

    #[test]
    fn decayed_update_hand_cases() {
        let mut s = DwaaState::new(0.2, 100);
        s.update_weights(&PerModule([1.0; 5]));
        assert_eq!(s.weights.0, [1.0; 5]);
        let mut s = DwaaState::new(0.2, 100);
        s.update_weights(&PerModule([1.1, 1.0, 1.0, 1.0, 0.9]));
        assert!((s.weights[ModuleId::Track] - 1.08).abs() < 1e-12);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn nan_window_is_rejected() {
        let mut s = DwaaState::new(0.2, 100);
        assert!(matches!(s.record_window(PerModule([1.0, f64::NAN, 1.0, 1.0, 1.0])), Err(Error::Numeric(_))));
    }

    #[test]
    fn window_accumulator_means() {
        let mut w = WindowAccumulator::default();
        w.push(&PerModule([1.0, 2.0, 3.0, 4.0, 5.0]));
        w.push(&PerModule([3.0, 2.0, 1.0, 0.0, 5.0]));
        assert_eq!(w.take_mean().unwrap().0, [2.0, 2.0, 2.0, 2.0, 5.0]);
        assert!(w.take_mean().is_none());
    }
}
