//! A single image perturbation optimized over a whole dataset.

use serde::{Deserialize, Serialize};

use super::project::{project_in_place, Norm};
use crate::autodiff::{sign, Tape, Var};
use crate::pipeline::{weighted_rows, PerModule, PerSite, Pipeline, SiteId};
use crate::rng::{SeededRng, Stream};
use crate::task::dataset::Dataset;
use crate::task::model::site_shape;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalConfig {
    /// l-infinity budget.
    pub eps: f64,
    /// Sign-step size; `None` means eps / 5.
    pub step_size: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for UniversalConfig {
    fn default() -> Self {
        Self { eps: 0.2, step_size: None, epochs: 3, batch_size: 32, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct UniversalNoise {
    /// Shape `[1, C, H, W]`.
    pub delta: Tensor,
    pub eps: f64,
    /// Mean total loss per epoch, measured while optimizing.
    pub epoch_losses: Vec<f64>,
}

impl UniversalNoise {
    /// The noise repeated over `batch_size` rows.
    pub fn tiled(&self, batch_size: usize) -> Tensor {
        let mut shape = self.delta.shape().to_vec();
        shape[0] = batch_size;
        let data = self.delta.data().repeat(batch_size);
        Tensor::new(shape, data).expect("tiled shape")
    }
}

/// Projected sign ascent on the mean total loss, one step per batch.
pub fn universal_noise(pipeline: &Pipeline, dataset: &Dataset, cfg: &UniversalConfig) -> Result<UniversalNoise> {
    if dataset.is_empty() {
        return Err(Error::contract("universal noise needs a non-empty dataset"));
    }
    if !(cfg.eps >= 0.0 && cfg.eps.is_finite()) || cfg.batch_size == 0 {
        return Err(Error::contract("universal noise needs eps >= 0 and a positive batch size"));
    }
    let step = cfg.step_size.unwrap_or(cfg.eps / 5.0);
    let mut shape = vec![1];
    shape.extend(site_shape(SiteId::Images));
    let mut rng = SeededRng::new(cfg.seed, Stream::Universal);
    let n: usize = shape.iter().product();
    let init = (0..n).map(|_| rng.uniform(-cfg.eps, cfg.eps)).collect();
    let mut noise = UniversalNoise { delta: Tensor::new(shape, init)?, eps: cfg.eps, epoch_losses: Vec::new() };
    let batches = dataset.batches(cfg.batch_size)?;
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in &batches {
            let mut tape = Tape::new();
            let params = pipeline.bind(&mut tape, false)?;
            let leaf = tape.leaf(noise.tiled(batch.len()), true)?;
            let mut vars = PerSite::<Option<Var>>::default();
            vars[SiteId::Images] = Some(leaf);
            let trace = pipeline.trace(&mut tape, &params, batch, &vars)?;
            let rows = weighted_rows(&mut tape, &trace.loss_rows, &PerModule::ones())?;
            let sum = tape.sum(rows)?;
            total += tape.value(sum).item();
            let g = tape.backward(sum)?.get_or_zeros(leaf, &[batch.len(), n]);
            let g = g.data();
            for (i, d) in noise.delta.data_mut().iter_mut().enumerate() {
                let acc: f64 = (0..batch.len()).map(|r| g[r * n + i]).sum();
                *d += step * sign(acc);
            }
            project_in_place(noise.delta.data_mut(), Norm::Linf, cfg.eps);
        }
        noise.epoch_losses.push(total / dataset.len() as f64);
    }
    Ok(noise)
}
