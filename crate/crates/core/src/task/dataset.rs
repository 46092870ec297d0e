//! Synthetic dataset generation, batching and the on-disk split format.
//!
//! # Split file layout (version 1, little-endian)
//!
//! ```text
//! magic      8 bytes  "MA2TDSET"
//! version    u32      1
//! split      u8       0 = train, 1 = val
//! cfg_len    u32      length of the JSON-encoded DatasetConfig
//! cfg        cfg_len bytes
//! count      u32      number of scenarios
//! per scenario:
//!   corridor center0, bend_x, slope         3 x f64
//!   ego x, y, speed                         3 x f64
//!   n_obstacles                             u8
//!   per obstacle: x, y, vx, vy              4 x f64
//! ```
//!
//! Observations and labels are not stored; they are pure functions of the
//! scenario and are recomputed on load.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::raster::{make_labels, rasterize, Labels, MASK_GRID, OCC_GRID, SENTINEL};
use super::scenario::{generate_scenario, Corridor, Ego, Obstacle, Point, Scenario, HORIZON, MAX_OBSTACLES};
use crate::binio::{Reader, Writer};
use crate::rng::mix_seed;
use crate::task::model::{displacement_to_model, position_to_model};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MA2TDSET";
const VERSION: u32 = 1;
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_scenarios: usize,
    /// Relative weights of 0, 1, 2 and 3 obstacles.
    pub obstacle_count_weights: [f64; 4],
    /// Ego speed range in cells/step.
    pub ego_speed: (f64, f64),
    /// Obstacle longitudinal speed range in cells/step.
    pub obstacle_speed: (f64, f64),
    /// Obstacle lateral speed is drawn from `[-v, v]`.
    pub obstacle_lateral_speed: f64,
    pub bend_probability: f64,
    /// Fraction of scenarios in the train split.
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenarios: 2000,
            obstacle_count_weights: [0.1, 0.3, 0.3, 0.3],
            ego_speed: (1.0, 2.0),
            obstacle_speed: (-0.5, 1.0),
            obstacle_lateral_speed: 0.3,
            bend_probability: 0.5,
            train_fraction: 0.8,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenarios == 0 {
            return Err(Error::config("dataset.n_scenarios", "must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("dataset.train_fraction", "must lie in (0, 1)"));
        }
        if self.obstacle_count_weights.iter().any(|w| !(*w >= 0.0)) || self.obstacle_count_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("dataset.obstacle_count_weights", "must be non-negative with a positive sum"));
        }
        for (key, (lo, hi)) in [("dataset.ego_speed", self.ego_speed), ("dataset.obstacle_speed", self.obstacle_speed)] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config(key, "range must satisfy lo <= hi"));
            }
        }
        if !(self.ego_speed.0 > 0.0) {
            return Err(Error::config("dataset.ego_speed", "must be positive"));
        }
        if !(self.obstacle_lateral_speed >= 0.0) {
            return Err(Error::config("dataset.obstacle_lateral_speed", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.bend_probability) {
            return Err(Error::config("dataset.bend_probability", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scenario: Scenario,
    /// `[4, 32, 32]`.
    pub obs: Tensor,
    pub labels: Labels,
}

impl Sample {
    pub fn from_scenario(scenario: Scenario) -> Result<Self> {
        let labels = make_labels(&scenario)?;
        let obs = rasterize(&scenario).raster;
        Ok(Self { scenario, obs, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub cfg: DatasetConfig,
    pub samples: Vec<Sample>,
}

/// Both splits generated from one config.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
}

impl Dataset {
    /// Generate all scenarios and split them. A pure function of `cfg`.
    pub fn generate(cfg: &DatasetConfig) -> Result<DatasetSplits> {
        cfg.validate()?;
        let mut samples = Vec::with_capacity(cfg.n_scenarios);
        for i in 0..cfg.n_scenarios as u64 {
            samples.push(generate_feasible(mix_seed(cfg.seed, i), cfg)?);
        }
        let n_train = ((cfg.n_scenarios as f64 * cfg.train_fraction).round() as usize).clamp(1, cfg.n_scenarios);
        let val = samples.split_off(n_train);
        Ok(DatasetSplits {
            train: Dataset { split: Split::Train, cfg: cfg.clone(), samples },
            val: Dataset { split: Split::Val, cfg: cfg.clone(), samples: val },
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        Dataset { split: self.split, cfg: self.cfg.clone(), samples: self.samples.iter().take(n).cloned().collect() }
    }

    /// Consecutive batches in dataset order.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        self.samples.chunks(batch_size.max(1)).map(|c| Batch::from_samples(&c.iter().collect::<Vec<_>>())).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut out = Writer::new(w);
        out.bytes(MAGIC)?;
        out.u32(VERSION)?;
        out.u8(match self.split {
            Split::Train => 0,
            Split::Val => 1,
        })?;
        let cfg = serde_json::to_vec(&self.cfg)?;
        out.u32(cfg.len() as u32)?;
        out.bytes(&cfg)?;
        out.u32(self.samples.len() as u32)?;
        for s in &self.samples {
            let sc = &s.scenario;
            out.f64s(&[sc.corridor.center0, sc.corridor.bend_x, sc.corridor.slope])?;
            out.f64s(&[sc.ego.position.x, sc.ego.position.y, sc.ego.speed])?;
            out.u8(sc.obstacles.len() as u8)?;
            for o in &sc.obstacles {
                out.f64s(&[o.position.x, o.position.y, o.velocity.x, o.velocity.y])?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut inp = Reader::new(r);
        if &inp.array::<8>()? != MAGIC {
            return Err(Error::format("not a dataset split file"));
        }
        let version = inp.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported dataset version {version}")));
        }
        let split = match inp.u8()? {
            0 => Split::Train,
            1 => Split::Val,
            v => return Err(Error::format(format!("bad split tag {v}"))),
        };
        let cfg_len = inp.u32()? as usize;
        let cfg: DatasetConfig = serde_json::from_slice(&inp.vec(cfg_len)?)?;
        let count = inp.u32()? as usize;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let [center0, bend_x, slope] = inp.f64_array()?;
            let [ex, ey, speed] = inp.f64_array()?;
            let n = inp.u8()? as usize;
            if n > MAX_OBSTACLES {
                return Err(Error::format(format!("{n} obstacles in one scenario")));
            }
            let mut obstacles = Vec::with_capacity(n);
            for _ in 0..n {
                let [x, y, vx, vy] = inp.f64_array()?;
                obstacles.push(Obstacle { position: Point::new(x, y), velocity: Point::new(vx, vy) });
            }
            let scenario = Scenario {
                corridor: Corridor { center0, bend_x, slope },
                ego: Ego { position: Point::new(ex, ey), speed },
                obstacles,
            };
            samples.push(Sample::from_scenario(scenario)?);
        }
        Ok(Dataset { split, cfg, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn generate_feasible(seed: u64, cfg: &DatasetConfig) -> Result<Sample> {
    let mut last_err = None;
    for attempt in 0..MAX_ATTEMPTS {
        let scenario = generate_scenario(mix_seed(seed, attempt), cfg);
        match Sample::from_scenario(scenario) {
            Ok(s) => return Ok(s),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::contract("scenario generation failed")))
}

/// Model-space training targets for a batch, with masks for padded slots.
#[derive(Debug, Clone)]
pub struct Targets {
    pub track: Tensor,
    pub track_mask: Tensor,
    pub map: Tensor,
    pub motion: Tensor,
    pub motion_mask: Tensor,
    pub occ: Tensor,
    pub plan: Tensor,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 4, 32, 32]`.
    pub obs: Tensor,
    pub targets: Targets,
    pub labels: Vec<Labels>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let obs = Tensor::stack(&samples.iter().map(|s| &s.obs).collect::<Vec<_>>())?;
        let labels: Vec<Labels> = samples.iter().map(|s| s.labels.clone()).collect();
        Self::from_parts(obs, labels)
    }

    /// Build a batch from explicit (possibly perturbed) observations.
    pub fn from_parts(obs: Tensor, labels: Vec<Labels>) -> Result<Self> {
        let b = labels.len();
        if obs.rows() != b {
            return Err(Error::dim("batch", format!("{} observations for {b} labels", obs.rows())));
        }
        let mut track = Vec::with_capacity(b * 6);
        let mut track_mask = Vec::with_capacity(b * 6);
        let mut map = Vec::with_capacity(b * MASK_GRID * MASK_GRID);
        let mut motion = Vec::with_capacity(b * 18);
        let mut motion_mask = Vec::with_capacity(b * 18);
        let mut occ = Vec::with_capacity(b * HORIZON * OCC_GRID * OCC_GRID);
        let mut plan = Vec::with_capacity(b * 6);
        for l in &labels {
            for (i, p) in l.obstacle_positions.iter().enumerate() {
                let valid = i < l.obstacle_count;
                for &v in p {
                    track.push(if valid { position_to_model(v) } else { 0.0 });
                    track_mask.push(if valid { 1.0 } else { 0.0 });
                }
            }
            map.extend_from_slice(&l.drivable_mask);
            for (i, steps) in l.future_displacements.iter().enumerate() {
                let valid = i < l.obstacle_count;
                for &v in steps.iter().flatten() {
                    debug_assert!(valid || v == SENTINEL);
                    motion.push(if valid { displacement_to_model(v) } else { 0.0 });
                    motion_mask.push(if valid { 1.0 } else { 0.0 });
                }
            }
            occ.extend_from_slice(&l.future_occupancy);
            plan.extend(l.expert_waypoints.iter().flatten().map(|&v| position_to_model(v)));
        }
        let targets = Targets {
            track: Tensor::new(vec![b, 6], track)?,
            track_mask: Tensor::new(vec![b, 6], track_mask)?,
            map: Tensor::new(vec![b, MASK_GRID * MASK_GRID], map)?,
            motion: Tensor::new(vec![b, 18], motion)?,
            motion_mask: Tensor::new(vec![b, 18], motion_mask)?,
            occ: Tensor::new(vec![b, HORIZON * OCC_GRID * OCC_GRID], occ)?,
            plan: Tensor::new(vec![b, 6], plan)?,
        };
        Ok(Self { obs, targets, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same labels, replaced observations.
    pub fn with_obs(&self, obs: Tensor) -> Result<Self> {
        if obs.shape() != self.obs.shape() {
            return Err(Error::dim("batch", format!("{:?} vs {:?}", obs.shape(), self.obs.shape())));
        }
        Ok(Self { obs, targets: self.targets.clone(), labels: self.labels.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig { n_scenarios: 40, seed: 9, ..Default::default() }
    }

    #[test]
    fn generation_is_pure() {
        let a = Dataset::generate(&small_cfg()).unwrap();
        let b = Dataset::generate(&small_cfg()).unwrap();
        for (x, y) in a.train.samples.iter().zip(&b.train.samples) {
            assert_eq!(x.scenario, y.scenario);
        }
        assert_eq!(a.train.len(), 32);
        assert_eq!(a.val.len(), 8);
    }

    #[test]
    fn zero_obstacle_config() {
        let cfg = DatasetConfig { obstacle_count_weights: [1.0, 0.0, 0.0, 0.0], ..small_cfg() };
        let d = Dataset::generate(&cfg).unwrap();
        for s in d.train.samples.iter().chain(&d.val.samples) {
            assert!(s.scenario.obstacles.is_empty());
            assert!(s.labels.future_displacements.iter().flatten().flatten().all(|&v| v == SENTINEL));
        }
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(DatasetConfig { n_scenarios: 0, ..Default::default() }.validate().is_err());
        assert!(DatasetConfig { train_fraction: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn batch_masks_padded_slots() {
        let d = Dataset::generate(&small_cfg()).unwrap();
        let batch = Batch::from_samples(&d.train.samples.iter().take(4).collect::<Vec<_>>()).unwrap();
        for (r, l) in batch.labels.iter().enumerate() {
            let valid = batch.targets.track_mask.row(r).iter().sum::<f64>();
            assert_eq!(valid as usize, 2 * l.obstacle_count);
        }
    }
}
