//! Clean pretraining, module-wise adversarial fine-tuning and the
//! image-only adversarial-training baselines.
//!
//! All methods share one loop. Per batch: generate the inner perturbation
//! against the current parameters (none for clean training), evaluate the
//! per-module losses under it, combine them with the current loss weights
//! and take one optimizer step on the non-frozen modules.

mod checkpoint;

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::Checkpoint;

use crate::attacks::{attack, image_budget, AttackConfig, AttackMethod, Norm, PerturbationSet, DEFAULT_IMAGE_EPS};
use crate::autodiff::{Tape, Var};
use crate::dwaa::{write_trajectory_csv, DwaaConfig, DwaaState, WindowAccumulator};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::pipeline::{weighted_rows, LossBreakdown, ModuleId, PerModule, PerSite, Pipeline};
use crate::rng::{mix_seed, SeededRng, Stream};
use crate::task::dataset::{Batch, Dataset};
use crate::task::model::build_reference_model;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const PRETRAIN_EPOCHS: usize = 20;
pub const PRETRAIN_LR: f64 = 1e-3;
pub const FINETUNE_EPOCHS: usize = 3;
pub const FINETUNE_LR: f64 = 1e-4;
pub const DEFAULT_BATCH_SIZE: usize = 32;
/// Restarts used by the inner maximization during training.
pub const TRAIN_ATTACK_RESTARTS: usize = 1;
/// Largest tolerated fraction of numerically failed batches.
pub const MAX_SKIP_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Clean,
    Ma2t,
    Fat,
    PgdL1,
    PgdL2,
    PgdLinf,
}

impl TrainMethod {
    pub const ALL: [TrainMethod; 6] =
        [TrainMethod::Clean, TrainMethod::Ma2t, TrainMethod::Fat, TrainMethod::PgdL1, TrainMethod::PgdL2, TrainMethod::PgdLinf];

    pub fn name(self) -> &'static str {
        match self {
            TrainMethod::Clean => "clean",
            TrainMethod::Ma2t => "ma2t",
            TrainMethod::Fat => "fat",
            TrainMethod::PgdL1 => "pgd_l1",
            TrainMethod::PgdL2 => "pgd_l2",
            TrainMethod::PgdLinf => "pgd_linf",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, TrainMethod::Fat | TrainMethod::PgdL1 | TrainMethod::PgdL2 | TrainMethod::PgdLinf)
    }

    /// Inner attack used by this method during training.
    pub fn default_attack(self) -> AttackConfig {
        let images = |method, norm| {
            AttackConfig::images_only(method, norm, image_budget(norm, DEFAULT_IMAGE_EPS)).with_restarts(TRAIN_ATTACK_RESTARTS)
        };
        match self {
            TrainMethod::Clean => AttackConfig { budgets: PerSite([0.0; 5]), ..AttackConfig::module_wise_default() },
            TrainMethod::Ma2t => AttackConfig::module_wise_default().with_restarts(TRAIN_ATTACK_RESTARTS),
            TrainMethod::Fat => images(AttackMethod::Fgsm, Norm::Linf),
            TrainMethod::PgdL1 => images(AttackMethod::Pgd, Norm::L1),
            TrainMethod::PgdL2 => images(AttackMethod::Pgd, Norm::L2),
            TrainMethod::PgdLinf => images(AttackMethod::Pgd, Norm::Linf),
        }
    }
}

impl std::fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        TrainMethod::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::contract(format!("unknown training method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: TrainMethod,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub attack: AttackConfig,
    pub dwaa: DwaaConfig,
    pub frozen: Vec<ModuleId>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain(seed: u64) -> Self {
        Self {
            method: TrainMethod::Clean,
            epochs: PRETRAIN_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: PRETRAIN_LR,
            optimizer: OptimizerKind::Adam,
            attack: TrainMethod::Clean.default_attack(),
            dwaa: DwaaConfig { enabled: false, ..DwaaConfig::default() },
            frozen: Vec::new(),
            seed,
        }
    }

    pub fn finetune(method: TrainMethod, seed: u64) -> Self {
        Self {
            method,
            epochs: FINETUNE_EPOCHS,
            learning_rate: FINETUNE_LR,
            attack: method.default_attack(),
            dwaa: DwaaConfig { enabled: method == TrainMethod::Ma2t, ..DwaaConfig::default() },
            ..Self::pretrain(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        self.attack.validate()?;
        self.dwaa.validate()?;
        match self.method {
            TrainMethod::Clean if !self.attack.active_sites().is_empty() => {
                return Err(Error::config("attack.budgets", "clean training takes no perturbation"));
            }
            TrainMethod::Fat if self.attack.method != AttackMethod::Fgsm => {
                return Err(Error::config("attack.method", "fat trains on single-step fgsm examples"));
            }
            m if m.is_baseline() && !self.attack.is_image_only() => {
                return Err(Error::config("attack.budgets", "baselines perturb only the Images site"));
            }
            m if m.is_baseline() && self.dwaa.enabled => {
                return Err(Error::config("dwaa.enabled", "baselines train with fixed unit weights"));
            }
            _ => {}
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Run directory name: config-hash prefix and seed.
    pub fn run_name(&self) -> String {
        format!("{}-seed{}", &self.hash()[..16], self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub index: usize,
    pub epoch: usize,
    pub losses: PerModule<f64>,
    pub total: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub batches: Vec<BatchRecord>,
    /// `(update_index, weights)` after every weight update, starting with the initial weights.
    pub trajectory: Vec<(usize, PerModule<f64>)>,
    pub skipped: usize,
}

/// Train a freshly initialized reference model with unit weights.
pub fn pretrain_clean(train: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    if cfg.method != TrainMethod::Clean {
        return Err(Error::config("train.method", "pretraining is clean training"));
    }
    run(build_reference_model(cfg.seed), 0, train, cfg, None)
}

/// Module-wise adversarial fine-tuning from a pretrained checkpoint.
pub fn finetune_ma2t(pretrained: &Checkpoint, train: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    if cfg.method != TrainMethod::Ma2t {
        return Err(Error::config("train.method", "expected ma2t"));
    }
    finetune(pretrained, train, cfg)
}

/// Image-only adversarial fine-tuning.
pub fn finetune_baseline(pretrained: &Checkpoint, train: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    if !cfg.method.is_baseline() {
        return Err(Error::config("train.method", "expected one of fat, pgd_l1, pgd_l2, pgd_linf"));
    }
    finetune(pretrained, train, cfg)
}

/// Continue training from a checkpoint with any method.
pub fn finetune(pretrained: &Checkpoint, train: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    let mut pipeline = pretrained.pipeline.clone();
    pipeline.unfreeze_all();
    run(pipeline, pretrained.epoch, train, cfg, None)
}

/// As [`pretrain_clean`] / [`finetune`], saving `last_good.ckpt` into `abort_dir`
/// if training aborts on a numeric failure.
pub fn train_with_recovery(start: Option<&Checkpoint>, train: &Dataset, cfg: &TrainConfig, abort_dir: &Path) -> Result<TrainRun> {
    match start {
        None => run(build_reference_model(cfg.seed), 0, train, cfg, Some(abort_dir)),
        Some(c) => {
            let mut pipeline = c.pipeline.clone();
            pipeline.unfreeze_all();
            run(pipeline, c.epoch, train, cfg, Some(abort_dir))
        }
    }
}

struct Step {
    losses: PerModule<f64>,
    total: f64,
    grads: Vec<Option<Tensor>>,
}

/// Forward under `noise`, weighted total of per-module batch means, and
/// parameter gradients for every non-frozen module.
fn loss_and_grads(pipeline: &Pipeline, batch: &Batch, noise: &PerturbationSet, weights: &PerModule<f64>) -> Result<Step> {
    let mut tape = Tape::new();
    let params = pipeline.bind(&mut tape, true)?;
    let mut vars = PerSite::<Option<Var>>::default();
    for (site, d) in noise.sites() {
        vars[site] = Some(tape.constant(d.clone())?);
    }
    let trace = pipeline.trace(&mut tape, &params, batch, &vars)?;
    let mut means = PerModule::<Option<Var>>::default();
    for id in ModuleId::ALL {
        means[id] = Some(tape.mean(trace.loss_rows[id])?);
    }
    let means = means.map(|v| v.expect("filled"));
    let total = weighted_rows(&mut tape, &means, weights)?;
    let mut grads = tape.backward(total)?;
    let mut out = Vec::new();
    for m in &pipeline.modules {
        for &v in params.module(m.id) {
            out.push(if m.frozen { None } else { grads.take(v) });
        }
    }
    Ok(Step { losses: means.map(|&v| tape.value(v).item()), total: tape.value(total).item(), grads: out })
}

fn run(
    mut pipeline: Pipeline,
    start_epoch: u64,
    train: &Dataset,
    cfg: &TrainConfig,
    abort_dir: Option<&Path>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training needs a non-empty dataset"));
    }
    pipeline.freeze_modules(&cfg.frozen);
    let active: Vec<bool> = pipeline.params().map(|(id, _)| !pipeline.module(id).frozen).collect();
    let mut optimizer = OptimizerState::new(cfg.optimizer, cfg.learning_rate)?;
    let mut dwaa = DwaaState::from_config(&cfg.dwaa);
    let mut window = WindowAccumulator::default();
    let mut trajectory = vec![(0, dwaa.current_weights())];
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let planned = batches_per_epoch * cfg.epochs;
    let mut index = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        SeededRng::derived(cfg.seed, Stream::Shuffle, start_epoch + epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_samples(&chunk.iter().map(|&i| &train.samples[i]).collect::<Vec<_>>())?;
            let weights = if cfg.dwaa.enabled { dwaa.current_weights() } else { PerModule::ones() };
            let attack_cfg = AttackConfig { seed: mix_seed(cfg.seed ^ cfg.attack.seed, index as u64), ..cfg.attack.clone() };
            let outcome = attack(&pipeline, &batch, &attack_cfg)
                .and_then(|a| loss_and_grads(&pipeline, &batch, &a.perturbation, &weights));
            match outcome {
                Ok(step) => {
                    let grads: Vec<Option<&Tensor>> = step.grads.iter().map(Option::as_ref).collect();
                    let mut params: Vec<&mut Tensor> =
                        pipeline.modules.iter_mut().flat_map(|m| m.params.iter_mut().map(|p| &mut p.value)).collect();
                    optimizer.step_masked(&mut params, &grads, &active)?;
                    window.push(&step.losses);
                    records.push(BatchRecord { index, epoch, losses: step.losses, total: step.total, skipped: false });
                }
                Err(Error::Numeric(reason)) => {
                    skipped += 1;
                    records.push(BatchRecord { index, epoch, losses: PerModule([f64::NAN; 5]), total: f64::NAN, skipped: true });
                    let abort = cfg.method == TrainMethod::Clean || skipped as f64 > MAX_SKIP_FRACTION * planned as f64;
                    if abort {
                        if let Some(dir) = abort_dir {
                            std::fs::create_dir_all(dir)?;
                            let ckpt = Checkpoint {
                                pipeline: pipeline.clone(),
                                method: cfg.method,
                                seed: cfg.seed,
                                epoch: start_epoch + epoch as u64,
                                dwaa: cfg.dwaa.enabled.then(|| dwaa.clone()),
                            };
                            ckpt.save(&dir.join("last_good.ckpt"))?;
                        }
                        return Err(Error::numeric(format!(
                            "training aborted at batch {index} after {skipped} numerically failed batches: {reason}"
                        )));
                    }
                    warn!("skipping batch {index}: {reason}");
                }
                Err(e) => return Err(e),
            }
            index += 1;
            if cfg.dwaa.enabled && index % cfg.dwaa.update_period == 0 {
                if let Some(means) = window.take_mean() {
                    if dwaa.step(means)? {
                        trajectory.push((dwaa.t, dwaa.current_weights()));
                    }
                }
            }
        }
        let done: Vec<&BatchRecord> = records.iter().filter(|r| r.epoch == epoch && !r.skipped).collect();
        let mean = done.iter().map(|r| r.total).sum::<f64>() / done.len().max(1) as f64;
        info!("{} epoch {}/{}: mean weighted loss {mean:.5}", cfg.method, epoch + 1, cfg.epochs);
    }

    let checkpoint = Checkpoint {
        pipeline,
        method: cfg.method,
        seed: cfg.seed,
        epoch: start_epoch + cfg.epochs as u64,
        dwaa: cfg.dwaa.enabled.then_some(dwaa),
    };
    Ok(TrainRun { checkpoint, batches: records, trajectory, skipped })
}

/// Mean per-module loss over a dataset, unit-weighted total.
pub fn evaluate_loss(pipeline: &Pipeline, data: &Dataset, batch_size: usize) -> Result<LossBreakdown> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let mut sums = [0.0; 5];
    for batch in data.batches(batch_size)? {
        let eval = pipeline.forward(&batch)?;
        for id in ModuleId::ALL {
            sums[id.index()] += eval.loss_rows[id].sum();
        }
    }
    let per_module = PerModule(sums.map(|s| s / data.len() as f64));
    Ok(LossBreakdown { total: per_module.sum(), per_module })
}

/// Write `batches.csv`, `dwaa.csv`, `config.json` and `final.ckpt` into `dir`.
pub fn write_run(run: &TrainRun, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("batches.csv"))?);
    writeln!(f, "batch,epoch,L_Track,L_Map,L_Motion,L_Occ,L_Plan,L_total,skipped")?;
    for r in &run.batches {
        let losses: Vec<String> = r.losses.values().map(|v| format!("{v}")).collect();
        writeln!(f, "{},{},{},{},{}", r.index, r.epoch, losses.join(","), r.total, u8::from(r.skipped))?;
    }
    f.flush()?;
    write_trajectory_csv(&dir.join("dwaa.csv"), &run.trajectory)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    run.checkpoint.save(&dir.join("final.ckpt"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in TrainMethod::ALL {
            assert_eq!(m.name().parse::<TrainMethod>().unwrap(), m);
        }
        assert_eq!("pgd-linf".parse::<TrainMethod>().unwrap(), TrainMethod::PgdLinf);
    }

    #[test]
    fn baseline_attacks_are_image_only() {
        for m in [TrainMethod::Fat, TrainMethod::PgdL1, TrainMethod::PgdL2, TrainMethod::PgdLinf] {
            let c = TrainConfig::finetune(m, 0);
            c.validate().unwrap();
            assert!(c.attack.is_image_only());
            assert!(!c.dwaa.enabled);
        }
        assert_eq!(TrainMethod::PgdL2.default_attack().budgets.0[0], 204.8);
    }

    #[test]
    fn fat_with_several_steps_is_rejected() {
        let mut c = TrainConfig::finetune(TrainMethod::Fat, 0);
        c.attack.steps = 3;
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
        let mut c = TrainConfig::finetune(TrainMethod::Fat, 0);
        c.attack.method = AttackMethod::Pgd;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_hash_tracks_every_field() {
        let base = TrainConfig::finetune(TrainMethod::Ma2t, 1);
        let mut variants = vec![base.clone()];
        let mut c = base.clone();
        c.epochs += 1;
        variants.push(c);
        let mut c = base.clone();
        c.learning_rate *= 2.0;
        variants.push(c);
        let mut c = base.clone();
        c.attack.budgets.0[3] = 0.2;
        variants.push(c);
        let mut c = base.clone();
        c.dwaa.r = 0.3;
        variants.push(c);
        let mut c = base.clone();
        c.frozen.push(ModuleId::Map);
        variants.push(c);
        let mut c = base.clone();
        c.seed = 2;
        variants.push(c);
        let hashes: std::collections::HashSet<String> = variants.iter().map(TrainConfig::hash).collect();
        assert_eq!(hashes.len(), variants.len());
        assert_eq!(base.hash(), base.clone().hash());
    }
}
