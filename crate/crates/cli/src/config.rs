//! The run configuration file.
//!
//! TOML with sections `[dataset]`, `[model]`, `[train]`, `[attack]`,
//! `[dwaa]`, `[eval]` and `[sim]`. Every key is optional; missing keys take
//! the documented defaults and unknown keys are rejected. The resolved
//! configuration is written back as TOML and re-parses to itself.
//!
//! The top-level `seed` is the run seed; `dataset.seed` always follows it.

use std::collections::BTreeMap;

use ma2t::attacks::{image_budget, AttackConfig, AttackMethod, Norm, Objective, UniversalConfig, DEFAULT_IMAGE_EPS};
use ma2t::dwaa::DwaaConfig;
use ma2t::optim::OptimizerKind;
use ma2t::pipeline::{ModuleId, PerSite, SiteId};
use ma2t::sim::{SimConfig, DEFAULT_COLLISION_RADIUS, DEFAULT_EPISODE_LENGTH, DEFAULT_TARGET_DISTANCE};
use ma2t::task::dataset::DatasetConfig;
use ma2t::trainer::{TrainConfig, TrainMethod, DEFAULT_BATCH_SIZE, FINETUNE_EPOCHS, FINETUNE_LR, PRETRAIN_EPOCHS, PRETRAIN_LR};
use ma2t::Error;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub dwaa: DwaaConfig,
    pub eval: EvalSection,
    pub sim: SimSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            dwaa: DwaaConfig::default(),
            eval: EvalSection::default(),
            sim: SimSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Modules excluded from fine-tuning, by name.
    pub frozen: Vec<ModuleId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub finetune_epochs: usize,
    pub finetune_learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            pretrain_epochs: PRETRAIN_EPOCHS,
            pretrain_learning_rate: PRETRAIN_LR,
            finetune_epochs: FINETUNE_EPOCHS,
            finetune_learning_rate: FINETUNE_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Attack settings for the `attack` subcommand and for module-wise training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub method: AttackMethod,
    pub norm: Norm,
    pub objective: Objective,
    /// l-infinity image budget; image-only attacks derive their l1/l2 budget from it.
    pub eps: f64,
    /// Per-site budgets of the module-wise attack.
    pub budgets: BTreeMap<SiteId, f64>,
    /// Per-site step sizes; missing sites use budget / 5.
    pub step_size: BTreeMap<SiteId, f64>,
    pub steps: usize,
    pub restarts: usize,
    pub momentum: f64,
    /// `true` perturbs every site with `budgets`, `false` only the images with `eps`.
    pub module_wise: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = AttackConfig::module_wise_default();
        Self {
            method: d.method,
            norm: d.norm,
            objective: d.objective,
            eps: DEFAULT_IMAGE_EPS,
            budgets: d.budgets.iter().map(|(s, &b)| (s, b)).collect(),
            step_size: BTreeMap::new(),
            steps: d.steps,
            restarts: d.restarts,
            momentum: d.momentum,
            module_wise: true,
        }
    }
}

impl AttackSection {
    /// The budgets of the module-wise attack, site by site.
    pub fn site_budgets(&self) -> PerSite<f64> {
        PerSite::from_fn(|s| self.budgets.get(&s).copied().unwrap_or(0.0))
    }

    pub fn to_attack(&self, seed: u64) -> AttackConfig {
        let mut cfg = if self.module_wise {
            AttackConfig { budgets: self.site_budgets(), ..AttackConfig::module_wise_default() }
        } else {
            AttackConfig::images_only(self.method, self.norm, image_budget(self.norm, self.eps))
        };
        cfg.method = self.method;
        cfg.norm = self.norm;
        cfg.objective = self.objective;
        cfg.steps = if self.method == AttackMethod::Fgsm { 1 } else { self.steps };
        cfg.restarts = self.restarts;
        cfg.momentum = self.momentum;
        if !self.step_size.is_empty() {
            let budgets = cfg.budgets;
            cfg.step_size = Some(PerSite::from_fn(|s| self.step_size.get(&s).copied().unwrap_or(budgets[s] / 5.0)));
        }
        cfg.seed = seed;
        cfg
    }

    fn validate(&self) -> ma2t::Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::config("attack.eps", format!("must be a non-negative finite number, got {}", self.eps)));
        }
        if self.steps == 0 {
            return Err(Error::config("attack.steps", "must be positive"));
        }
        self.to_attack(0).validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Validation samples used by every evaluation.
    pub samples: usize,
    /// Number of attack seeds, derived from the run seed.
    pub n_seeds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { samples: 200, n_seeds: 3 }
    }
}

impl EvalSection {
    /// Attack seeds: `run_seed`, `run_seed + 1`, ...
    pub fn seeds(&self, run_seed: u64) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| run_seed + i).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub episode_length: usize,
    pub n_episodes: usize,
    pub collision_radius: f64,
    pub target_distance: f64,
    /// l-infinity budget of the universal perturbation; 0 disables the attack.
    pub universal_eps: f64,
    pub universal_epochs: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            episode_length: DEFAULT_EPISODE_LENGTH,
            n_episodes: 50,
            collision_radius: DEFAULT_COLLISION_RADIUS,
            target_distance: DEFAULT_TARGET_DISTANCE,
            universal_eps: DEFAULT_IMAGE_EPS,
            universal_epochs: UniversalConfig::default().epochs,
        }
    }
}

impl RunConfig {
    /// Parse, apply a seed override and validate.
    pub fn resolve(text: &str, seed: Option<u64>) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(ConfigError::from_toml)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.dataset.seed = cfg.seed;
        cfg.validate().map_err(ConfigError::from_core)?;
        Ok(cfg)
    }

    #[cfg(test)]
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::resolve(text, None)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> ma2t::Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config("version", format!("unsupported config version {}", self.version)));
        }
        self.dataset.validate()?;
        self.train_config(TrainMethod::Clean, 0).validate()?;
        self.attack.validate()?;
        self.dwaa.validate()?;
        for m in TrainMethod::ALL.into_iter().filter(|&m| m != TrainMethod::Clean) {
            self.train_config(m, 0).validate()?;
        }
        if self.train.pretrain_epochs == 0 {
            return Err(Error::config("train.pretrain_epochs", "must be positive"));
        }
        if self.train.finetune_epochs == 0 {
            return Err(Error::config("train.finetune_epochs", "must be positive"));
        }
        if self.eval.samples == 0 {
            return Err(Error::config("eval.samples", "must be positive"));
        }
        if self.eval.n_seeds == 0 {
            return Err(Error::config("eval.n_seeds", "must be positive"));
        }
        if !(self.sim.universal_eps >= 0.0 && self.sim.universal_eps.is_finite()) {
            return Err(Error::config("sim.universal_eps", "must be a non-negative finite number"));
        }
        if self.sim.universal_epochs == 0 {
            return Err(Error::config("sim.universal_epochs", "must be positive"));
        }
        self.sim_config().validate()
    }

    /// Training settings for `method`; MA2T uses the `[attack]` budgets and `[dwaa]`.
    pub fn train_config(&self, method: TrainMethod, seed: u64) -> TrainConfig {
        let mut cfg = match method {
            TrainMethod::Clean => TrainConfig {
                epochs: self.train.pretrain_epochs,
                learning_rate: self.train.pretrain_learning_rate,
                ..TrainConfig::pretrain(seed)
            },
            _ => TrainConfig {
                epochs: self.train.finetune_epochs,
                learning_rate: self.train.finetune_learning_rate,
                ..TrainConfig::finetune(method, seed)
            },
        };
        cfg.batch_size = self.train.batch_size;
        cfg.optimizer = self.train.optimizer;
        if method == TrainMethod::Ma2t {
            cfg.attack = AttackConfig {
                budgets: self.attack.site_budgets(),
                steps: self.attack.steps,
                ..cfg.attack
            };
            cfg.dwaa = self.dwaa.clone();
        }
        if method != TrainMethod::Clean {
            cfg.frozen = self.model.frozen.clone();
        }
        cfg
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            episode_length: self.sim.episode_length,
            n_episodes: self.sim.n_episodes,
            world_seed: self.seed,
            collision_radius: self.sim.collision_radius,
            target_distance: self.sim.target_distance,
            world: self.dataset.clone(),
        }
    }

    pub fn universal_config(&self) -> UniversalConfig {
        UniversalConfig { eps: self.sim.universal_eps, epochs: self.sim.universal_epochs, seed: self.seed, ..UniversalConfig::default() }
    }
}

/// A configuration problem with the offending key when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub reason: String,
}

impl ConfigError {
    fn from_toml(e: toml::de::Error) -> Self {
        Self { key: None, reason: e.message().to_string() }
    }

    pub fn from_core(e: Error) -> Self {
        match e {
            Error::Config { key, reason } => Self { key: Some(key), reason },
            other => Self { key: None, reason: other.to_string() },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let attack = cfg.attack.to_attack(0);
        assert_eq!(attack.budgets.0, [0.8, 0.1, 0.1, 0.1, 0.1]);
        assert_eq!((attack.steps, attack.restarts), (5, 5));
        assert!((attack.step_for(SiteId::Images) - 0.16).abs() < 1e-15);
        assert_eq!(cfg.dwaa, DwaaConfig { enabled: true, r: 0.2, update_period: 100 });
        assert_eq!(cfg.train_config(TrainMethod::Ma2t, 0).epochs, 3);
    }

    #[test]
    fn empty_attack_section_takes_defaults() {
        let cfg = RunConfig::parse("[attack]\n").unwrap();
        assert_eq!(cfg.attack, AttackSection::default());
        assert_eq!(cfg.attack.eps, 0.2);
    }

    #[test]
    fn resolved_config_is_a_fixed_point() {
        let cfg = RunConfig::parse("[attack]\neps = 0.1\nmodule_wise = false\n[sim]\nn_episodes = 7\n").unwrap();
        let echoed = cfg.to_toml();
        let again = RunConfig::parse(&echoed).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml(), echoed);
    }

    #[test]
    fn comments_do_not_change_resolution() {
        let a = RunConfig::parse("[train]\nbatch_size = 16\n").unwrap();
        let b = RunConfig::parse("# tuned\n[train] # section\nbatch_size = 16 # smaller\n").unwrap();
        assert_eq!(a.to_toml(), b.to_toml());
    }

    #[test]
    fn seed_override_reaches_the_dataset() {
        let cfg = RunConfig::resolve("seed = 3\n", Some(9)).unwrap();
        assert_eq!((cfg.seed, cfg.dataset.seed), (9, 9));
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[attack]\nepsilon = 0.1\n").is_err());
        assert!(RunConfig::parse("[bogus]\n").is_err());
    }

    #[test]
    fn negative_budget_names_its_key() {
        let e = RunConfig::parse("[attack]\neps = -0.1\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("attack.eps"));
        let e = RunConfig::parse("[attack.budgets]\nImages = -0.5\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("attack.budgets.Images"));
    }
}
