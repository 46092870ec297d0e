use super::{clean_row, collect_metrics, metadata, EvalMatrix, Metrics, Row, RowSource};
use crate::attacks::{attack, image_budget, AttackConfig, AttackMethod, Norm, Objective, DEFAULT_IMAGE_EPS};
use crate::pipeline::{Pipeline, SiteId};
use crate::rng::mix_seed;
use crate::task::dataset::Dataset;
use crate::task::model::check_architecture;
use crate::trainer::Checkpoint;
use crate::Result;

/// Image-only FGSM-linf, MI-FGSM-linf and PGD under every norm, with the
/// l1/l2 budgets derived from the l-infinity `eps`.
pub fn image_attacks(eps: f64) -> Vec<AttackConfig> {
    let mut list = vec![
        AttackConfig::images_only(AttackMethod::Fgsm, Norm::Linf, eps),
        AttackConfig::images_only(AttackMethod::Mifgsm, Norm::Linf, eps),
    ];
    for norm in [Norm::L1, Norm::L2, Norm::Linf] {
        list.push(AttackConfig::images_only(AttackMethod::Pgd, norm, image_budget(norm, eps)));
    }
    list
}

/// [`image_attacks`] at the default budget plus the module-wise PGD-linf attack.
pub fn default_whitebox_attacks() -> Vec<AttackConfig> {
    let mut list = image_attacks(DEFAULT_IMAGE_EPS);
    list.push(AttackConfig::module_wise_default());
    list
}

/// Human-readable row label, unique per descriptor.
pub(crate) fn describe(cfg: &AttackConfig) -> String {
    let mut s = if cfg.is_image_only() {
        format!("{} eps={}", cfg.label(), cfg.budgets[SiteId::Images])
    } else {
        let b: Vec<String> = cfg.budgets.values().map(|v| v.to_string()).collect();
        format!("module-wise {} eps=({})", cfg.label(), b.join("/"))
    };
    s.push_str(&format!(" steps={} restarts={}", cfg.steps, cfg.restarts));
    if cfg.objective != Objective::TotalLoss {
        s.push_str(&format!(" {}", cfg.objective.name()));
    }
    s
}

/// One row per attack, pooling samples over `seeds`.
pub fn whitebox_rows(pipeline: &Pipeline, data: &Dataset, attacks: &[AttackConfig], seeds: &[u64]) -> Result<Vec<Row>> {
    attacks
        .iter()
        .map(|cfg| {
            let mut samples = Vec::new();
            for &seed in seeds {
                samples.extend(collect_metrics(pipeline, data, |i, b| {
                    let c = AttackConfig { seed: mix_seed(seed, i as u64), ..cfg.clone() };
                    Ok(Some(attack(pipeline, b, &c)?.perturbation))
                })?);
            }
            Ok(Row {
                label: describe(cfg),
                source: RowSource::Attack { attack: cfg.clone() },
                metrics: Metrics::from_samples(&samples),
                candidates: Vec::new(),
            })
        })
        .collect()
}

/// Attacks generated against the victim itself.
pub fn evaluate_whitebox(victim: &Checkpoint, data: &Dataset, attacks: &[AttackConfig], seeds: &[u64]) -> Result<EvalMatrix> {
    super::require_seeds(seeds)?;
    check_architecture(&victim.pipeline)?;
    let pipeline = &victim.pipeline;
    let restarts = attacks.iter().map(|a| a.restarts).max().unwrap_or(0);
    Ok(EvalMatrix {
        name: "whitebox".into(),
        clean: clean_row(pipeline, data)?,
        rows: whitebox_rows(pipeline, data, attacks, seeds)?,
        metadata: metadata(victim, data, restarts, seeds),
    })
}
