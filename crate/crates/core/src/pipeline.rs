//! The modular end-to-end model: five modules wired Track, Map -> Motion ->
//! Occ, Plan, with a named injection site in front of every module input.
//!
//! Module internals (layers and per-module losses) come from
//! [`crate::task::model`]; this module only knows the wiring, the sites, and
//! how per-module losses combine into a total.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::PerturbationSet;
use crate::autodiff::{Tape, Var};
use crate::task::model;
use crate::task::Batch;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleId {
    Track,
    Map,
    Motion,
    Occ,
    Plan,
}

impl ModuleId {
    /// Topological order.
    pub const ALL: [ModuleId; 5] = [ModuleId::Track, ModuleId::Map, ModuleId::Motion, ModuleId::Occ, ModuleId::Plan];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleId::Track => "Track",
            ModuleId::Map => "Map",
            ModuleId::Motion => "Motion",
            ModuleId::Occ => "Occ",
            ModuleId::Plan => "Plan",
        }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModuleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleId::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::contract(format!("unknown module id `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteId {
    Images,
    TrackMotion,
    MapMotion,
    MotionOcc,
    MotionPlan,
}

impl SiteId {
    pub const ALL: [SiteId; 5] = [SiteId::Images, SiteId::TrackMotion, SiteId::MapMotion, SiteId::MotionOcc, SiteId::MotionPlan];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SiteId::Images => "Images",
            SiteId::TrackMotion => "TrackMotion",
            SiteId::MapMotion => "MapMotion",
            SiteId::MotionOcc => "MotionOcc",
            SiteId::MotionPlan => "MotionPlan",
        }
    }

    /// The module whose loss is the nearest objective for noise at this site.
    pub fn nearest_module(self) -> ModuleId {
        match self {
            SiteId::Images => ModuleId::Track,
            SiteId::TrackMotion | SiteId::MapMotion => ModuleId::Motion,
            SiteId::MotionOcc => ModuleId::Occ,
            SiteId::MotionPlan => ModuleId::Plan,
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SiteId::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::contract(format!("unknown injection site `{s}`")))
    }
}

macro_rules! keyed_array {
    ($name:ident, $key:ty) => {
        /// Fixed-size map with one slot per key, in key order.
        #[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
        pub struct $name<T>(pub [T; 5]);

        impl<T> $name<T> {
            pub fn from_fn(mut f: impl FnMut($key) -> T) -> Self {
                Self(<$key>::ALL.map(|k| f(k)))
            }

            pub fn iter(&self) -> impl Iterator<Item = ($key, &T)> {
                <$key>::ALL.into_iter().zip(self.0.iter())
            }

            pub fn values(&self) -> impl Iterator<Item = &T> {
                self.0.iter()
            }

            pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> $name<U> {
                $name::from_fn(|k| f(&self[k]))
            }
        }

        impl<T> Index<$key> for $name<T> {
            type Output = T;
            fn index(&self, k: $key) -> &T {
                &self.0[k.index()]
            }
        }

        impl<T> IndexMut<$key> for $name<T> {
            fn index_mut(&mut self, k: $key) -> &mut T {
                &mut self.0[k.index()]
            }
        }
    };
}

keyed_array!(PerModule, ModuleId);
keyed_array!(PerSite, SiteId);

impl PerModule<f64> {
    pub fn ones() -> Self {
        Self([1.0; 5])
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Per-sample descriptor of one injection site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSite {
    pub id: SiteId,
    /// Shape of one sample's tensor at the site (no batch axis).
    pub shape: Vec<usize>,
    pub default_budget: f64,
    pub clamp_range: Option<(f64, f64)>,
}

/// Default l-infinity budgets, in site order.
pub const DEFAULT_SITE_BUDGETS: [f64; 5] = [0.8, 0.1, 0.1, 0.1, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleNode {
    pub id: ModuleId,
    pub params: Vec<Param>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_module: PerModule<f64>,
    pub total: f64,
}

/// Tape handles for every parameter, grouped by module.
#[derive(Debug, Clone)]
pub struct BoundParams(PerModule<Vec<Var>>);

impl BoundParams {
    /// Handles built by the caller, one per parameter in declaration order.
    pub fn new(vars: PerModule<Vec<Var>>) -> Self {
        Self(vars)
    }

    pub fn module(&self, id: ModuleId) -> &[Var] {
        &self.0[id]
    }
}

/// Tape handles produced by one traced forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub heads: PerModule<Var>,
    /// Per-sample module losses, each of shape `[B]`.
    pub loss_rows: PerModule<Var>,
    /// Tensor entering each site's consumer, after injection.
    pub site_values: PerSite<Var>,
}

/// Concrete outputs of an evaluation pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub heads: PerModule<Tensor>,
    pub loss_rows: PerModule<Tensor>,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub arch: String,
    pub modules: Vec<ModuleNode>,
}

impl Pipeline {
    pub fn module(&self, id: ModuleId) -> &ModuleNode {
        &self.modules[id.index()]
    }

    pub fn module_mut(&mut self, id: ModuleId) -> &mut ModuleNode {
        &mut self.modules[id.index()]
    }

    pub fn parameter_count(&self) -> usize {
        self.modules.iter().flat_map(|m| &m.params).map(|p| p.value.len()).sum()
    }

    /// All parameters in module order, then declaration order.
    pub fn params(&self) -> impl Iterator<Item = (ModuleId, &Param)> {
        self.modules.iter().flat_map(|m| m.params.iter().map(move |p| (m.id, p)))
    }

    /// SHA-256 over every parameter's bit pattern.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (id, p) in self.params() {
            h.update([id as u8]);
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// The five injection sites in fixed order.
    pub fn list_injection_sites(&self) -> Vec<InjectionSite> {
        SiteId::ALL
            .into_iter()
            .map(|id| InjectionSite {
                id,
                shape: model::site_shape(id),
                default_budget: DEFAULT_SITE_BUDGETS[id.index()],
                clamp_range: (id == SiteId::Images).then_some((0.0, 1.0)),
            })
            .collect()
    }

    pub fn freeze_modules(&mut self, ids: &[ModuleId]) {
        for &id in ids {
            self.module_mut(id).frozen = true;
        }
    }

    /// Freeze by module name; unknown names are rejected before anything changes.
    pub fn freeze_by_name(&mut self, names: &[&str]) -> Result<()> {
        let ids = names.iter().map(|n| n.parse()).collect::<Result<Vec<ModuleId>>>()?;
        self.freeze_modules(&ids);
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        for m in &mut self.modules {
            m.frozen = false;
        }
    }

    /// Register every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<BoundParams> {
        let mut bound = PerModule::<Vec<Var>>::default();
        for m in &self.modules {
            bound[m.id] = m.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect::<Result<_>>()?;
        }
        Ok(BoundParams(bound))
    }

    /// Forward pass on `tape`, adding `noise[site]` (shape `[B, ..site]`) at each site that has one.
    pub fn trace(&self, tape: &mut Tape, params: &BoundParams, batch: &Batch, noise: &PerSite<Option<Var>>) -> Result<Trace> {
        let raster = tape.constant(batch.obs.clone())?;
        let (heads, site_values) = self.heads(tape, params, raster, noise)?;
        let mut loss_rows = PerModule::<Option<Var>>::default();
        for id in ModuleId::ALL {
            loss_rows[id] = Some(model::module_loss(id, tape, heads[id], &batch.targets)?);
        }
        Ok(Trace { heads, loss_rows: loss_rows.map(|v| v.expect("filled")), site_values })
    }

    /// Head outputs for a `[B, 4, 32, 32]` raster on the tape, without losses.
    pub fn heads(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        raster: Var,
        noise: &PerSite<Option<Var>>,
    ) -> Result<(PerModule<Var>, PerSite<Var>)> {
        let b = tape.shape(raster)[0];
        for site in SiteId::ALL {
            if let Some(v) = noise[site] {
                let mut want = vec![b];
                want.extend(model::site_shape(site));
                if tape.shape(v) != want.as_slice() {
                    return Err(Error::contract(format!(
                        "noise at site {site} has shape {:?}, expected {want:?}",
                        tape.shape(v)
                    )));
                }
            }
        }
        let inject = |tape: &mut Tape, site: SiteId, x: Var| -> Result<Var> {
            match noise[site] {
                None => Ok(x),
                Some(d) => {
                    let y = tape.add(x, d)?;
                    if site == SiteId::Images {
                        tape.clamp(y, 0.0, 1.0)
                    } else {
                        Ok(y)
                    }
                }
            }
        };

        let images = inject(tape, SiteId::Images, raster)?;
        let (track_feat, track_head) = model::module_forward(ModuleId::Track, tape, params.module(ModuleId::Track), &[images])?;
        let (map_feat, map_head) = model::module_forward(ModuleId::Map, tape, params.module(ModuleId::Map), &[images])?;
        let track_motion = inject(tape, SiteId::TrackMotion, track_feat)?;
        let map_motion = inject(tape, SiteId::MapMotion, map_feat)?;
        let (motion_feat, motion_head) =
            model::module_forward(ModuleId::Motion, tape, params.module(ModuleId::Motion), &[track_motion, map_motion])?;
        let motion_occ = inject(tape, SiteId::MotionOcc, motion_feat)?;
        let motion_plan = inject(tape, SiteId::MotionPlan, motion_feat)?;
        let (_, occ_head) = model::module_forward(ModuleId::Occ, tape, params.module(ModuleId::Occ), &[motion_occ])?;
        let (_, plan_head) = model::module_forward(ModuleId::Plan, tape, params.module(ModuleId::Plan), &[motion_plan])?;

        let heads = PerModule([track_head, map_head, motion_head, occ_head, plan_head]);
        Ok((heads, PerSite([images, track_motion, map_motion, motion_occ, motion_plan])))
    }

    /// Head outputs for raw observations with optional module-wise noise; no labels needed.
    pub fn predict(&self, obs: &Tensor, noise: Option<&PerturbationSet>) -> Result<PerModule<Tensor>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let mut vars = PerSite::<Option<Var>>::default();
        if let Some(set) = noise {
            for (site, d) in set.sites() {
                vars[site] = Some(tape.constant(d.clone())?);
            }
        }
        let raster = tape.constant(obs.clone())?;
        let (heads, _) = self.heads(&mut tape, &params, raster, &vars)?;
        Ok(heads.map(|&v| tape.value(v).clone()))
    }

    /// Evaluation-mode forward with optional module-wise noise.
    pub fn forward_with_noise(&self, batch: &Batch, noise: Option<&PerturbationSet>) -> Result<Evaluation> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let mut vars = PerSite::<Option<Var>>::default();
        if let Some(set) = noise {
            for (site, delta) in set.deltas.iter() {
                if let Some(d) = delta {
                    vars[site] = Some(tape.constant(d.clone())?);
                }
            }
        }
        let trace = self.trace(&mut tape, &params, batch, &vars)?;
        let loss_rows = trace.loss_rows.map(|&v| tape.value(v).clone());
        let per_module = loss_rows.map(|t| t.sum() / t.len() as f64);
        let total = total_loss(&per_module, &PerModule::ones())?;
        Ok(Evaluation {
            heads: trace.heads.map(|&v| tape.value(v).clone()),
            loss_rows,
            breakdown: LossBreakdown { per_module, total },
        })
    }

    pub fn forward(&self, batch: &Batch) -> Result<Evaluation> {
        self.forward_with_noise(batch, None)
    }
}

fn check_weights(weights: &PerModule<f64>) -> Result<()> {
    for (id, &w) in weights.iter() {
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::contract(format!("weight for {id} must be positive, got {w}")));
        }
    }
    Ok(())
}

/// `sum_j W_j * L_j`.
pub fn total_loss(per_module: &PerModule<f64>, weights: &PerModule<f64>) -> Result<f64> {
    check_weights(weights)?;
    Ok(per_module.values().zip(weights.values()).map(|(l, w)| w * l).sum())
}

/// Weighted sum of per-sample module losses on the tape: returns `[B]`.
///
/// Modules with weight exactly 0 are skipped, which lets attack objectives
/// select a subset of modules; training weights must be positive and are
/// checked by [`total_loss`].
pub fn weighted_rows(tape: &mut Tape, rows: &PerModule<Var>, weights: &PerModule<f64>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for id in ModuleId::ALL {
        let w = weights[id];
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { rows[id] } else { tape.scale(rows[id], w)? };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::contract("objective selects no module"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_weights_sum_losses() {
        let l = PerModule([1.0; 5]);
        assert_eq!(total_loss(&l, &PerModule::ones()).unwrap(), 5.0);
    }

    #[test]
    fn weighted_total_hand_case() {
        let l = PerModule([2.0, 0.0, 0.0, 0.0, 0.0]);
        let w = PerModule([0.5, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(total_loss(&l, &w).unwrap(), 1.0);
    }

    #[test]
    fn rejects_non_positive_weight() {
        let l = PerModule([1.0; 5]);
        let w = PerModule([1.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(matches!(total_loss(&l, &w), Err(Error::Contract(_))));
        let w = PerModule([1.0, -1.0, 1.0, 1.0, 1.0]);
        assert!(total_loss(&l, &w).is_err());
    }

    #[test]
    fn permuting_pairs_keeps_total() {
        let l = [0.3, 1.7, 0.2, 2.5, 0.9];
        let w = [1.1, 0.8, 1.3, 0.9, 0.9];
        let base = total_loss(&PerModule(l), &PerModule(w)).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let lp = perm.map(|i| l[i]);
        let wp = perm.map(|i| w[i]);
        let t = total_loss(&PerModule(lp), &PerModule(wp)).unwrap();
        assert!((t - base).abs() < 1e-12);
    }

    #[test]
    fn ids_parse_case_insensitively() {
        assert_eq!("plan".parse::<ModuleId>().unwrap(), ModuleId::Plan);
        assert_eq!("motionocc".parse::<SiteId>().unwrap(), SiteId::MotionOcc);
        assert!("Lidar".parse::<ModuleId>().is_err());
    }
}
