//! Per-sample evaluation metrics, all in grid cells.

use serde::{Deserialize, Serialize};

use super::model::{displacement_from_model, position_from_model};
use super::raster::Labels;
use super::scenario::{HORIZON, MAX_OBSTACLES};
use crate::autodiff::sigmoid;
use crate::pipeline::{ModuleId, PerModule};
use crate::tensor::Tensor;

/// Mean Euclidean distance between corresponding waypoints.
pub fn metric_avg_l2(pred: &[[f64; 2]], expert: &[[f64; 2]]) -> f64 {
    debug_assert_eq!(pred.len(), expert.len());
    let total: f64 = pred.iter().zip(expert).map(|(p, e)| (p[0] - e[0]).hypot(p[1] - e[1])).sum();
    total / pred.len() as f64
}

/// Intersection over union of `sigmoid(logits) >= threshold` against a binary mask.
/// Two empty masks score 1.
pub fn metric_iou(pred_logits: &[f64], true_mask: &[f64], threshold: f64) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&l, &t) in pred_logits.iter().zip(true_mask) {
        let p = sigmoid(l) >= threshold;
        let t = t >= 0.5;
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// A metric that is undefined when the sample has no obstacles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Masked {
    pub value: f64,
    pub valid: bool,
}

/// Single-mode displacement error: mean over valid obstacles and steps.
///
/// `pred` is `[obstacle][step][xy]` flattened, in cells.
pub fn metric_min_ade(pred: &[f64], truth: &[[[f64; 2]; HORIZON]; MAX_OBSTACLES], obstacle_count: usize) -> Masked {
    if obstacle_count == 0 {
        return Masked { value: 0.0, valid: false };
    }
    let mut total = 0.0;
    for (i, steps) in truth.iter().enumerate().take(obstacle_count) {
        for (s, t) in steps.iter().enumerate() {
            let k = (i * HORIZON + s) * 2;
            total += (pred[k] - t[0]).hypot(pred[k + 1] - t[1]);
        }
    }
    Masked { value: total / (obstacle_count * HORIZON) as f64, valid: true }
}

/// Mean position error over present obstacles; `pred` is `[obstacle][xy]` flattened, in cells.
pub fn metric_det_err(pred: &[f64], truth: &[[f64; 2]; MAX_OBSTACLES], obstacle_count: usize) -> Masked {
    if obstacle_count == 0 {
        return Masked { value: 0.0, valid: false };
    }
    let total: f64 = truth.iter().take(obstacle_count).enumerate().map(|(i, t)| (pred[2 * i] - t[0]).hypot(pred[2 * i + 1] - t[1])).sum();
    Masked { value: total / obstacle_count as f64, valid: true }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub avg_l2: f64,
    pub iou_map: f64,
    pub min_ade: Masked,
    pub iou_occ: f64,
    pub det_err: Masked,
}

/// Planned waypoints in cells for row `r` of a Plan head output.
pub fn plan_waypoints(plan_head: &Tensor, r: usize) -> [[f64; 2]; HORIZON] {
    let row = plan_head.row(r);
    std::array::from_fn(|s| [position_from_model(row[2 * s]), position_from_model(row[2 * s + 1])])
}

/// Metrics for every sample of a batch from raw head outputs.
pub fn sample_metrics(heads: &PerModule<Tensor>, labels: &[Labels]) -> Vec<SampleMetrics> {
    labels
        .iter()
        .enumerate()
        .map(|(r, l)| {
            let plan = plan_waypoints(&heads[ModuleId::Plan], r);
            let det: Vec<f64> = heads[ModuleId::Track].row(r).iter().map(|&v| position_from_model(v)).collect();
            let disp: Vec<f64> = heads[ModuleId::Motion].row(r).iter().map(|&v| displacement_from_model(v)).collect();
            SampleMetrics {
                avg_l2: metric_avg_l2(&plan, &l.expert_waypoints),
                iou_map: metric_iou(heads[ModuleId::Map].row(r), &l.drivable_mask, 0.5),
                min_ade: metric_min_ade(&disp, &l.future_displacements, l.obstacle_count),
                iou_occ: metric_iou(heads[ModuleId::Occ].row(r), &l.future_occupancy, 0.5),
                det_err: metric_det_err(&det, &l.obstacle_positions, l.obstacle_count),
            }
        })
        .collect()
}
