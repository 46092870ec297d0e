use super::whitebox::describe;
use super::{clean_row, collect_metrics, metadata, Candidate, EvalMatrix, Metrics, Row, RowSource};
use crate::attacks::{attack, AttackConfig, DEFAULT_IMAGE_EPS};
use crate::rng::mix_seed;
use crate::task::dataset::Dataset;
use crate::task::model::check_architecture;
use crate::trainer::Checkpoint;
use crate::{Error, Result};

/// A named model used to craft transferred perturbations.
#[derive(Debug, Clone, Copy)]
pub struct Surrogate<'a> {
    pub name: &'a str,
    pub checkpoint: &'a Checkpoint,
}

/// Image-only candidates searched for the strongest transfer attack.
pub fn default_transfer_attacks() -> Vec<AttackConfig> {
    super::image_attacks(DEFAULT_IMAGE_EPS)
}

/// For each surrogate, transfer every candidate attack to the victim and
/// report the one with the largest avg_l2 degradation.
pub fn evaluate_blackbox(
    victim: &Checkpoint,
    surrogates: &[Surrogate<'_>],
    data: &Dataset,
    attacks: &[AttackConfig],
    seeds: &[u64],
) -> Result<EvalMatrix> {
    super::require_seeds(seeds)?;
    check_architecture(&victim.pipeline)?;
    if attacks.is_empty() {
        return Err(Error::contract("black-box evaluation needs at least one candidate attack"));
    }
    if let Some(a) = attacks.iter().find(|a| !a.is_image_only()) {
        return Err(Error::contract(format!("transfer attack `{}` perturbs feature sites", describe(a))));
    }
    let clean = clean_row(&victim.pipeline, data)?;
    let mut rows = Vec::new();
    for s in surrogates {
        check_architecture(&s.checkpoint.pipeline)?;
        let mut best: Option<Row> = None;
        let mut candidates = Vec::new();
        for cfg in attacks {
            let mut samples = Vec::new();
            for &seed in seeds {
                samples.extend(collect_metrics(&victim.pipeline, data, |i, b| {
                    let c = AttackConfig { seed: mix_seed(seed, i as u64), ..cfg.clone() };
                    Ok(Some(attack(&s.checkpoint.pipeline, b, &c)?.perturbation))
                })?);
            }
            let metrics = Metrics::from_samples(&samples);
            let degradation = metrics.avg_l2.mean - clean.metrics.avg_l2.mean;
            let label = describe(cfg);
            candidates.push(Candidate { label: label.clone(), avg_l2_degradation: degradation });
            let better = best.as_ref().map_or(true, |b| metrics.avg_l2.mean > b.metrics.avg_l2.mean);
            if better {
                best = Some(Row {
                    label: format!("{}: {label}", s.name),
                    source: RowSource::Transfer { surrogate: s.name.to_string(), attack: cfg.clone() },
                    metrics,
                    candidates: Vec::new(),
                });
            }
        }
        let mut row = best.expect("at least one candidate");
        row.candidates = candidates;
        rows.push(row);
    }
    let restarts = attacks.iter().map(|a| a.restarts).max().unwrap_or(0);
    Ok(EvalMatrix { name: "blackbox".into(), clean, rows, metadata: metadata(victim, data, restarts, seeds) })
}
