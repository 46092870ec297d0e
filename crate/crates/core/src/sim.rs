//! Kinematic closed-loop evaluation.
//!
//! The world rolls with the ego: each step it is translated so the ego sits
//! at its starting cell, rasterized, optionally perturbed by a universal
//! image perturbation, and handed to a driver. The ego moves
//! towards the driver's first waypoint, at most 2 cells per step, and
//! obstacles advance by their constant velocities. A collision is counted
//! each time the ego enters a state where an obstacle lies within the
//! collision radius or the ego has left the corridor.
//!
//! `driving_score = mean(completion * 0.5^collisions)` with
//! `completion = clamp(distance travelled along x / target_distance, 0, 1)`.
//!
//! Episodes run in lockstep so the driver sees one batch per step.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pipeline::{ModuleId, Pipeline};
use crate::attacks::Norm;
use crate::rng::mix_seed;
use crate::task::dataset::DatasetConfig;
use crate::task::metrics::plan_waypoints;
use crate::task::raster::rasterize;
use crate::task::scenario::{expert_plan, generate_scenario, Point, Scenario, GRID};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_EPISODE_LENGTH: usize = 40;
pub const DEFAULT_COLLISION_RADIUS: f64 = 1.5;
pub const MAX_EGO_STEP: f64 = 2.0;
pub const DEFAULT_TARGET_DISTANCE: f64 = 24.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub episode_length: usize,
    pub n_episodes: usize,
    pub world_seed: u64,
    pub collision_radius: f64,
    /// Longitudinal distance in cells that completes an episode.
    pub target_distance: f64,
    /// World generation parameters.
    pub world: DatasetConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            episode_length: DEFAULT_EPISODE_LENGTH,
            n_episodes: 50,
            world_seed: 0,
            collision_radius: DEFAULT_COLLISION_RADIUS,
            target_distance: DEFAULT_TARGET_DISTANCE,
            world: DatasetConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episode_length == 0 {
            return Err(Error::config("sim.episode_length", "must be positive"));
        }
        if self.n_episodes == 0 {
            return Err(Error::config("sim.n_episodes", "must be positive"));
        }
        if !(self.collision_radius > 0.0 && self.collision_radius.is_finite()) {
            return Err(Error::config("sim.collision_radius", "must be positive"));
        }
        if !(self.target_distance > 0.0 && self.target_distance.is_finite()) {
            return Err(Error::config("sim.target_distance", "must be positive"));
        }
        self.world.validate()
    }
}

/// A universal image perturbation applied to every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SimAttack {
    /// `[1, 4, 32, 32]`.
    pub delta: Tensor,
    pub eps: f64,
}

impl SimAttack {
    pub fn validate(&self) -> Result<()> {
        if self.delta.shape() != [1, 4, GRID, GRID] {
            return Err(Error::contract(format!("universal perturbation has shape {:?}", self.delta.shape())));
        }
        let n = Norm::Linf.of(self.delta.data());
        if n > self.eps + crate::attacks::BUDGET_TOLERANCE {
            return Err(Error::contract(format!("universal perturbation norm {n} exceeds {}", self.eps)));
        }
        Ok(())
    }
}

/// Chooses the next target point for every running episode.
pub trait Driver {
    /// `views` are ego-anchored worlds and `obs` their (possibly perturbed) rasters `[B, 4, 32, 32]`.
    /// Waypoints are in view coordinates; `None` marks a non-finite plan.
    fn first_waypoints(&self, views: &[Scenario], obs: &Tensor) -> Result<Vec<Option<[f64; 2]>>>;
}

/// Follows the pipeline's planned trajectory.
pub struct PipelineDriver<'a>(pub &'a Pipeline);

impl Driver for PipelineDriver<'_> {
    fn first_waypoints(&self, _views: &[Scenario], obs: &Tensor) -> Result<Vec<Option<[f64; 2]>>> {
        let heads = self.0.predict(obs, None)?;
        let plan = &heads[ModuleId::Plan];
        Ok((0..plan.rows())
            .map(|r| {
                let wp = plan_waypoints(plan, r)[0];
                (wp[0].is_finite() && wp[1].is_finite()).then_some(wp)
            })
            .collect())
    }
}

/// Follows the expert planner on the true state; ignores the observation.
pub struct ExpertDriver;

impl Driver for ExpertDriver {
    fn first_waypoints(&self, views: &[Scenario], _obs: &Tensor) -> Result<Vec<Option<[f64; 2]>>> {
        Ok(views
            .iter()
            .map(|w| match expert_plan(w) {
                Ok(p) => Some([p[0].x, p[0].y]),
                Err(_) => Some([w.ego.position.x + w.ego.speed, w.corridor.center(w.ego.position.x + w.ego.speed)]),
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub collision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub completion: f64,
    pub collisions: usize,
    pub off_corridor: usize,
    pub steps: usize,
    /// The driver produced a non-finite plan.
    pub failed: bool,
    pub trace: Vec<TraceStep>,
}

impl EpisodeResult {
    pub fn score(&self) -> f64 {
        self.completion * 0.5f64.powi(self.collisions as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub episodes: Vec<EpisodeResult>,
    pub driving_score: f64,
    pub completion_rate: f64,
    /// Mean collisions per episode.
    pub collision_rate: f64,
    pub failed_episodes: usize,
}

impl SimResult {
    fn from_episodes(episodes: Vec<EpisodeResult>) -> Self {
        let n = episodes.len() as f64;
        Self {
            driving_score: episodes.iter().map(EpisodeResult::score).sum::<f64>() / n,
            completion_rate: episodes.iter().map(|e| e.completion).sum::<f64>() / n,
            collision_rate: episodes.iter().map(|e| e.collisions as f64).sum::<f64>() / n,
            failed_episodes: episodes.iter().filter(|e| e.failed).count(),
            episodes,
        }
    }

    /// `episode,step,x,y,collision` for every recorded step.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "episode,step,x,y,collision")?;
        for (i, e) in self.episodes.iter().enumerate() {
            for t in &e.trace {
                writeln!(f, "{i},{},{},{},{}", t.step, t.x, t.y, u8::from(t.collision))?;
            }
        }
        f.flush()?;
        Ok(())
    }
}

struct Episode {
    world: Scenario,
    start: Point,
    colliding: bool,
    off: bool,
    result: EpisodeResult,
    done: bool,
}

impl Episode {
    fn completion(&self, target_distance: f64) -> f64 {
        ((self.world.ego.position.x - self.start.x) / target_distance).clamp(0.0, 1.0)
    }

    fn offset(&self) -> Point {
        let p = self.world.ego.position;
        Point::new(p.x - self.start.x, p.y - self.start.y)
    }
}

/// The initial world of episode `i`.
pub fn episode_world(cfg: &SimConfig, i: usize) -> Scenario {
    generate_scenario(mix_seed(cfg.world_seed, i as u64), &cfg.world)
}

pub fn run_closed_loop(driver: &dyn Driver, cfg: &SimConfig, attack: Option<&SimAttack>) -> Result<SimResult> {
    cfg.validate()?;
    if let Some(a) = attack {
        a.validate()?;
    }
    let mut episodes: Vec<Episode> = (0..cfg.n_episodes)
        .map(|i| {
            let world = episode_world(cfg, i);
            let start = world.ego.position;
            Episode {
                world,
                start,
                colliding: false,
                off: false,
                result: EpisodeResult { completion: 0.0, collisions: 0, off_corridor: 0, steps: 0, failed: false, trace: Vec::new() },
                done: false,
            }
        })
        .collect();

    for step in 0..cfg.episode_length {
        let running: Vec<usize> = (0..episodes.len()).filter(|&i| !episodes[i].done).collect();
        if running.is_empty() {
            break;
        }
        let views: Vec<Scenario> = running.iter().map(|&i| episodes[i].world.translated(episodes[i].offset())).collect();
        let frames: Vec<Tensor> = views.iter().map(|v| rasterize(v).raster).collect();
        let mut obs = Tensor::stack(&frames.iter().collect::<Vec<_>>())?;
        if let Some(a) = attack.filter(|a| a.eps > 0.0) {
            let mut shape = a.delta.shape().to_vec();
            shape[0] = running.len();
            let tiled = Tensor::new(shape, a.delta.data().repeat(running.len()))?;
            obs = add_clamped(&obs, &tiled)?;
        }
        let targets = driver.first_waypoints(&views, &obs)?;
        for (&i, target) in running.iter().zip(targets) {
            let e = &mut episodes[i];
            let Some(target) = target else {
                e.result.failed = true;
                e.result.collisions += 1;
                e.result.steps = step;
                e.done = true;
                continue;
            };
            let shift = e.offset();
            let ego = e.world.ego.position;
            let (mut dx, mut dy) = (target[0] + shift.x - ego.x, target[1] + shift.y - ego.y);
            let len = dx.hypot(dy);
            if len > MAX_EGO_STEP {
                dx *= MAX_EGO_STEP / len;
                dy *= MAX_EGO_STEP / len;
            }
            e.world.ego.position = Point::new(ego.x + dx, ego.y + dy);
            for o in &mut e.world.obstacles {
                o.position = o.at(1.0);
            }
            let ego = e.world.ego.position;
            let hit = e.world.obstacles.iter().any(|o| o.position.dist(ego) <= cfg.collision_radius);
            let off = !e.world.corridor.contains(ego);
            let colliding = hit || off;
            if colliding && !e.colliding {
                e.result.collisions += 1;
            }
            if off && !e.off {
                e.result.off_corridor += 1;
            }
            e.colliding = colliding;
            e.off = off;
            e.result.steps = step + 1;
            e.result.trace.push(TraceStep { step: step + 1, x: ego.x, y: ego.y, collision: colliding });
            if ego.x - e.start.x >= cfg.target_distance {
                e.done = true;
            }
        }
    }
    let target_distance = cfg.target_distance;
    Ok(SimResult::from_episodes(
        episodes
            .into_iter()
            .map(|e| {
                let completion = e.completion(target_distance);
                EpisodeResult { completion, ..e.result }
            })
            .collect(),
    ))
}

fn add_clamped(obs: &Tensor, delta: &Tensor) -> Result<Tensor> {
    Ok(obs.zip_map(delta, |x, d| (x + d).clamp(0.0, 1.0))?)
}

/// One row of the defense comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub checkpoint: String,
    pub attacked: bool,
    pub driving_score: f64,
    pub completion_rate: f64,
    pub collision_rate: f64,
}

/// Every named pipeline with and without the attack.
pub fn compare_defenses(models: &[(&str, &Pipeline)], cfg: &SimConfig, attack: &SimAttack) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for &(name, p) in models {
        for attacked in [false, true] {
            let r = run_closed_loop(&PipelineDriver(p), cfg, attacked.then_some(attack))?;
            rows.push(ComparisonRow {
                checkpoint: name.to_string(),
                attacked,
                driving_score: r.driving_score,
                completion_rate: r.completion_rate,
                collision_rate: r.collision_rate,
            });
        }
    }
    Ok(rows)
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "checkpoint,condition,driving_score,completion_rate,collision_rate")?;
    for r in rows {
        let cond = if r.attacked { "attacked" } else { "clean" };
        writeln!(f, "{},{cond},{},{},{}", r.checkpoint, r.driving_score, r.completion_rate, r.collision_rate)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_on_empty_world_completes_cleanly() {
        let cfg = SimConfig {
            n_episodes: 10,
            world: DatasetConfig { obstacle_count_weights: [1.0, 0.0, 0.0, 0.0], ..DatasetConfig::default() },
            ..SimConfig::default()
        };
        let r = run_closed_loop(&ExpertDriver, &cfg, None).unwrap();
        for e in &r.episodes {
            assert_eq!(e.completion, 1.0);
            assert_eq!(e.collisions, 0);
        }
        assert_eq!(r.driving_score, 1.0);
    }

    #[test]
    fn score_halves_per_collision() {
        let e = EpisodeResult { completion: 0.8, collisions: 2, off_corridor: 0, steps: 5, failed: false, trace: Vec::new() };
        assert!((e.score() - 0.2).abs() < 1e-15);
    }
}
