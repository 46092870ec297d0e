//! First-order optimizers.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state for a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    moments: Vec<Option<Moments>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {learning_rate}")));
        }
        Ok(Self { kind, learning_rate, moments: Vec::new(), step: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Update every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        let active = vec![true; params.len()];
        self.step_masked(params, grads, &active)
    }

    /// Update parameters whose `active` flag is set; inactive ones keep their values
    /// and their moment estimates.
    pub fn step_masked(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>], active: &[bool]) -> Result<()> {
        if params.len() != grads.len() || params.len() != active.len() {
            return Err(Error::contract("optimizer: params, grads and mask must align"));
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        for (i, ((p, g), &on)) in params.iter().zip(grads).zip(active).enumerate() {
            if !on {
                continue;
            }
            let g = g.ok_or_else(|| Error::contract(format!("optimizer: missing gradient for parameter {i}")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim("optimizer_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !active[i] {
                continue;
            }
            let g = g.expect("checked above").data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g) {
                        *pv -= lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.moments[i].get_or_insert_with(|| Moments {
                        first: vec![0.0; g.len()],
                        second: vec![0.0; g.len()],
                    });
                    for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g).enumerate() {
                        m.first[j] = ADAM_BETA1 * m.first[j] + (1.0 - ADAM_BETA1) * gv;
                        m.second[j] = ADAM_BETA2 * m.second[j] + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = m.first[j] / bias1;
                        let v_hat = m.second[j] / bias2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
