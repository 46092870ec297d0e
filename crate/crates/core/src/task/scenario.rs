//! Corridor-driving scenarios and the rule-based expert planner.
//!
//! Coordinates are in grid cells: `x` is the longitudinal axis the ego drives
//! along, `y` is lateral. Raster row = `y`, column = `x`.

use serde::{Deserialize, Serialize};

use super::dataset::DatasetConfig;
use crate::rng::{SeededRng, Stream};
use crate::{Error, Result};

pub const GRID: usize = 32;
pub const HORIZON: usize = 3;
pub const MAX_OBSTACLES: usize = 3;
pub const CORRIDOR_HALF_WIDTH: f64 = 4.0;
/// Distance at which an obstacle makes an expert candidate cost-prohibitive.
pub const EXPERT_CLEARANCE: f64 = 2.0;
pub const EXPERT_MAX_OFFSET: i32 = 6;
const OBSTACLE_PENALTY: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Integer raster cell `(col, row)` containing the point, if on the grid.
    pub fn cell(self) -> Option<(usize, usize)> {
        let (cx, cy) = (self.x.round(), self.y.round());
        let g = GRID as f64;
        (cx >= 0.0 && cx < g && cy >= 0.0 && cy < g).then(|| (cx as usize, cy as usize))
    }
}

/// A band of half-width [`CORRIDOR_HALF_WIDTH`] around a centerline that is
/// straight until `bend_x` and then continues with lateral `slope`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub center0: f64,
    pub bend_x: f64,
    pub slope: f64,
}

impl Corridor {
    pub fn center(&self, x: f64) -> f64 {
        self.center0 + self.slope * (x - self.bend_x).max(0.0)
    }

    pub fn contains(&self, p: Point) -> bool {
        (p.y - self.center(p.x)).abs() < CORRIDOR_HALF_WIDTH
    }

    /// Drivable mask on the full grid, row-major `[y][x]`.
    pub fn mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; GRID * GRID];
        for y in 0..GRID {
            for x in 0..GRID {
                if self.contains(Point::new(x as f64, y as f64)) {
                    m[y * GRID + x] = 1.0;
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ego {
    pub position: Point,
    /// Cells per step along +x.
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub position: Point,
    pub velocity: Point,
}

impl Obstacle {
    /// Constant-velocity position after `steps` (negative rolls back).
    pub fn at(&self, steps: f64) -> Point {
        Point::new(self.position.x + steps * self.velocity.x, self.position.y + steps * self.velocity.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub corridor: Corridor,
    pub ego: Ego,
    pub obstacles: Vec<Obstacle>,
}

impl Scenario {
    /// The same scene seen from a frame moved by `by`: every position shifts by `-by`.
    pub fn translated(&self, by: Point) -> Scenario {
        let shift = |p: Point| Point::new(p.x - by.x, p.y - by.y);
        Scenario {
            corridor: Corridor { center0: self.corridor.center0 - by.y, bend_x: self.corridor.bend_x - by.x, slope: self.corridor.slope },
            ego: Ego { position: shift(self.ego.position), speed: self.ego.speed },
            obstacles: self.obstacles.iter().map(|o| Obstacle { position: shift(o.position), velocity: o.velocity }).collect(),
        }
    }

    /// Checks the generation invariants.
    pub fn validate(&self) -> Result<()> {
        if self.obstacles.len() > MAX_OBSTACLES {
            return Err(Error::contract(format!("{} obstacles exceeds {MAX_OBSTACLES}", self.obstacles.len())));
        }
        if !self.corridor.contains(self.ego.position) {
            return Err(Error::contract("ego starts outside the corridor"));
        }
        if let Some(i) = self.obstacles.iter().position(|o| !self.corridor.contains(o.position)) {
            return Err(Error::contract(format!("obstacle {i} starts outside the corridor")));
        }
        Ok(())
    }
}

/// Draw one scenario. Deterministic in `(seed, cfg)`.
pub fn generate_scenario(seed: u64, cfg: &DatasetConfig) -> Scenario {
    let mut rng = SeededRng::new(seed, Stream::Data);
    let bend = rng.unit() < cfg.bend_probability;
    let corridor = Corridor {
        center0: rng.uniform(12.0, 20.0),
        bend_x: if bend { rng.uniform(8.0, 20.0) } else { 0.0 },
        slope: if bend { rng.uniform(-0.25, 0.25) } else { 0.0 },
    };
    let ex = rng.uniform(2.0, 5.0);
    let ego = Ego {
        position: Point::new(ex, corridor.center(ex) + rng.uniform(-1.5, 1.5)),
        speed: uniform_or_fixed(&mut rng, cfg.ego_speed),
    };
    let count = pick_weighted(&mut rng, &cfg.obstacle_count_weights);
    let obstacles = (0..count)
        .map(|_| {
            let ox = ego.position.x + rng.uniform(4.0, 12.0);
            let oy = corridor.center(ox) + rng.uniform(-3.0, 3.0);
            let vx = uniform_or_fixed(&mut rng, cfg.obstacle_speed);
            let vy = rng.uniform(-cfg.obstacle_lateral_speed, cfg.obstacle_lateral_speed);
            Obstacle { position: Point::new(ox, oy), velocity: Point::new(vx, vy) }
        })
        .collect();
    Scenario { corridor, ego, obstacles }
}

fn uniform_or_fixed(rng: &mut SeededRng, (lo, hi): (f64, f64)) -> f64 {
    if lo < hi {
        rng.uniform(lo, hi)
    } else {
        lo
    }
}

fn pick_weighted(rng: &mut SeededRng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.unit() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Lateral offsets in tie-break order: 0, -1, +1, -2, +2, ...
fn offsets_in_preference_order() -> impl Iterator<Item = i32> {
    std::iter::once(0).chain((1..=EXPERT_MAX_OFFSET).flat_map(|k| [-k, k]))
}

/// Expert cost of a lateral offset `o` at future step `step`.
pub fn expert_cost(scenario: &Scenario, step: usize, candidate: Point, offset: i32) -> f64 {
    let blocked = scenario.obstacles.iter().any(|o| o.at(step as f64).dist(candidate) <= EXPERT_CLEARANCE);
    OBSTACLE_PENALTY * f64::from(u8::from(blocked)) + f64::from(offset * offset)
}

/// Candidate waypoint for a lateral offset, or `None` if it is not drivable.
pub fn expert_candidate(scenario: &Scenario, step: usize, offset: i32) -> Option<Point> {
    let x = scenario.ego.position.x + step as f64 * scenario.ego.speed;
    let p = Point::new(x, scenario.corridor.center(x) + f64::from(offset));
    let in_grid = p.y >= 0.0 && p.y <= (GRID - 1) as f64;
    (in_grid && scenario.corridor.contains(p)).then_some(p)
}

/// Three waypoints, one per future step, minimizing obstacle penalty plus
/// squared lateral offset from the centerline. Ties go to the smaller
/// `|o|`, then to the negative offset.
pub fn expert_plan(scenario: &Scenario) -> Result<[Point; HORIZON]> {
    let mut plan = [Point::default(); HORIZON];
    for (i, wp) in plan.iter_mut().enumerate() {
        let step = i + 1;
        let mut best: Option<(f64, Point)> = None;
        for o in offsets_in_preference_order() {
            let Some(p) = expert_candidate(scenario, step, o) else { continue };
            let c = expert_cost(scenario, step, p, o);
            if best.map_or(true, |(bc, _)| c < bc) {
                best = Some((c, p));
            }
        }
        *wp = best.ok_or_else(|| Error::contract(format!("infeasible scenario: no drivable candidate at step {step}")))?.1;
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(center: f64) -> Corridor {
        Corridor { center0: center, bend_x: 0.0, slope: 0.0 }
    }

    fn scenario(obstacles: Vec<Obstacle>) -> Scenario {
        Scenario {
            corridor: straight(16.0),
            ego: Ego { position: Point::new(4.0, 16.0), speed: 1.5 },
            obstacles,
        }
    }

    #[test]
    fn no_obstacles_follows_centerline() {
        let plan = expert_plan(&scenario(vec![])).unwrap();
        for (i, wp) in plan.iter().enumerate() {
            assert_eq!(wp.x, 4.0 + (i + 1) as f64 * 1.5);
            assert_eq!(wp.y, 16.0);
        }
    }

    #[test]
    fn centerline_obstacle_forces_offset_three() {
        // Obstacle reaches the step-1 waypoint on the centerline and parks there.
        let obs = Obstacle { position: Point::new(5.5, 16.0), velocity: Point::new(0.0, 0.0) };
        let s = scenario(vec![obs]);
        // Exhaustive evaluation over o in -6..=6.
        let mut costs = Vec::new();
        for o in -EXPERT_MAX_OFFSET..=EXPERT_MAX_OFFSET {
            if let Some(p) = expert_candidate(&s, 1, o) {
                costs.push((expert_cost(&s, 1, p, o), o));
            }
        }
        let min_cost = costs.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        assert_eq!(min_cost, 9.0);
        let plan = expert_plan(&s).unwrap();
        assert_eq!(plan[0].y - 16.0, -3.0);
    }

    #[test]
    fn offsets_preference_order() {
        let v: Vec<i32> = offsets_in_preference_order().take(5).collect();
        assert_eq!(v, vec![0, -1, 1, -2, 2]);
    }

    #[test]
    fn bend_shifts_center_after_bend_only() {
        let c = Corridor { center0: 16.0, bend_x: 10.0, slope: 0.5 };
        assert_eq!(c.center(5.0), 16.0);
        assert_eq!(c.center(14.0), 18.0);
    }
}
