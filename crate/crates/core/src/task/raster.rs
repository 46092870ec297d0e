//! Observation rasters and supervision labels derived from a scenario.

use serde::{Deserialize, Serialize};

use super::scenario::{expert_plan, Point, Scenario, GRID, HORIZON, MAX_OBSTACLES};
use crate::tensor::Tensor;
use crate::Result;

pub const CHANNELS: usize = 4;
pub const CH_CORRIDOR: usize = 0;
pub const CH_EGO: usize = 1;
pub const CH_OBSTACLES: usize = 2;
pub const CH_OBSTACLES_PREV: usize = 3;

pub const MASK_GRID: usize = 16;
pub const OCC_GRID: usize = 8;
pub const SENTINEL: f64 = -1.0;

/// `[4, 32, 32]` raster in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub raster: Tensor,
}

fn paint(raster: &mut [f64], channel: usize, p: Point) {
    if let Some((x, y)) = p.cell() {
        raster[(channel * GRID + y) * GRID + x] = 1.0;
    }
}

pub fn rasterize(scenario: &Scenario) -> Observation {
    let mut data = vec![0.0; CHANNELS * GRID * GRID];
    data[..GRID * GRID].copy_from_slice(&scenario.corridor.mask());
    paint(&mut data, CH_EGO, scenario.ego.position);
    for o in &scenario.obstacles {
        paint(&mut data, CH_OBSTACLES, o.position);
        paint(&mut data, CH_OBSTACLES_PREV, o.at(-1.0));
    }
    Observation { raster: Tensor::new(vec![CHANNELS, GRID, GRID], data).expect("raster shape") }
}

/// Ground truth for every module head, in grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    /// `[obstacle][xy]`, sentinel-padded.
    pub obstacle_positions: [[f64; 2]; MAX_OBSTACLES],
    /// 16x16 drivable mask, row-major.
    pub drivable_mask: Vec<f64>,
    /// `[obstacle][step][xy]` displacement from the current position, sentinel-padded.
    pub future_displacements: [[[f64; 2]; HORIZON]; MAX_OBSTACLES],
    /// `[step][8x8]` binary occupancy of obstacles at each future step.
    pub future_occupancy: Vec<f64>,
    pub expert_waypoints: [[f64; 2]; HORIZON],
    pub obstacle_count: usize,
}

/// 2x2 max-pooled drivable mask.
pub fn downsample_mask(full: &[f64]) -> Vec<f64> {
    let f = GRID / MASK_GRID;
    let mut out = vec![0.0; MASK_GRID * MASK_GRID];
    for by in 0..MASK_GRID {
        for bx in 0..MASK_GRID {
            let mut v: f64 = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    v = v.max(full[(by * f + dy) * GRID + bx * f + dx]);
                }
            }
            out[by * MASK_GRID + bx] = v;
        }
    }
    out
}

/// Occupancy of the given positions on the 8x8 block grid.
pub fn occupancy_grid(points: impl IntoIterator<Item = Point>) -> Vec<f64> {
    let block = GRID / OCC_GRID;
    let mut g = vec![0.0; OCC_GRID * OCC_GRID];
    for p in points {
        if let Some((x, y)) = p.cell() {
            g[(y / block) * OCC_GRID + x / block] = 1.0;
        }
    }
    g
}

pub fn make_labels(scenario: &Scenario) -> Result<Labels> {
    let mut obstacle_positions = [[SENTINEL; 2]; MAX_OBSTACLES];
    let mut future_displacements = [[[SENTINEL; 2]; HORIZON]; MAX_OBSTACLES];
    for (i, o) in scenario.obstacles.iter().enumerate() {
        obstacle_positions[i] = [o.position.x, o.position.y];
        for s in 0..HORIZON {
            let k = (s + 1) as f64;
            future_displacements[i][s] = [k * o.velocity.x, k * o.velocity.y];
        }
    }
    let mut future_occupancy = Vec::with_capacity(HORIZON * OCC_GRID * OCC_GRID);
    for s in 1..=HORIZON {
        future_occupancy.extend(occupancy_grid(scenario.obstacles.iter().map(|o| o.at(s as f64))));
    }
    let plan = expert_plan(scenario)?;
    Ok(Labels {
        obstacle_positions,
        drivable_mask: downsample_mask(&scenario.corridor.mask()),
        future_displacements,
        future_occupancy,
        expert_waypoints: plan.map(|p| [p.x, p.y]),
        obstacle_count: scenario.obstacles.len(),
    })
}
