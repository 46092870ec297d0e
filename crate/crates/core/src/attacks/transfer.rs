//! Black-box transfer of image-level noise from a surrogate to a victim.

use super::engine::attack;
use super::{AttackConfig, PerturbationSet};
use crate::pipeline::{Evaluation, Pipeline};
use crate::task::dataset::Batch;
use crate::{Error, Result};

/// Victim outputs under a perturbation crafted on the surrogate.
#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub perturbation: PerturbationSet,
    pub victim: Evaluation,
}

/// Generate an Images-site perturbation white-box on `surrogate` and apply it to `victim`.
pub fn transfer_attack(surrogate: &Pipeline, victim: &Pipeline, batch: &Batch, cfg: &AttackConfig) -> Result<TransferOutcome> {
    if !cfg.is_image_only() {
        return Err(Error::contract("transfer attacks perturb only the Images site"));
    }
    let crafted = attack(surrogate, batch, cfg)?;
    let victim_eval = victim.forward_with_noise(batch, Some(&crafted.perturbation))?;
    Ok(TransferOutcome { perturbation: crafted.perturbation, victim: victim_eval })
}
