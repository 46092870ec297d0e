//! Module-wise perturbation sets and their file format.
//!
//! # File layout (version 1, little-endian)
//!
//! ```text
//! magic    8 bytes "MA2TPERT"
//! version  u32     1
//! norm     u8      0 = l1, 1 = l2, 2 = linf
//! count    u8      number of perturbed sites
//! per site:
//!   site   u8      0 Images, 1 TrackMotion, 2 MapMotion, 3 MotionOcc, 4 MotionPlan
//!   budget f64
//!   rank   u8, extents u32 x rank, data f64 x prod(extents)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::project::{project_in_place, Norm};
use crate::binio::{Reader, Writer};
use crate::pipeline::{PerSite, SiteId};
use crate::task::model::site_shape;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MA2TPERT";
const VERSION: u32 = 1;
/// Slack allowed on the per-sample norm constraint.
pub const BUDGET_TOLERANCE: f64 = 1e-9;

/// Per-site perturbations for a batch. Each delta has shape `[B, ..site]`
/// and every row satisfies `||row||_p <= budget`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    pub deltas: PerSite<Option<Tensor>>,
    pub budgets: PerSite<f64>,
    pub norm: Norm,
}

impl PerturbationSet {
    pub fn empty(norm: Norm) -> Self {
        Self { deltas: PerSite::default(), budgets: PerSite([0.0; 5]), norm }
    }

    /// A single site's perturbation.
    pub fn single(site: SiteId, delta: Tensor, budget: f64, norm: Norm) -> Self {
        let mut set = Self::empty(norm);
        set.deltas[site] = Some(delta);
        set.budgets[site] = budget;
        set
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.values().all(Option::is_none)
    }

    pub fn sites(&self) -> impl Iterator<Item = (SiteId, &Tensor)> {
        self.deltas.iter().filter_map(|(s, d)| d.as_ref().map(|d| (s, d)))
    }

    /// Largest per-sample norm at a site.
    pub fn max_norm(&self, site: SiteId) -> f64 {
        self.deltas[site].as_ref().map_or(0.0, |d| (0..d.rows()).map(|r| self.norm.of(d.row(r))).fold(0.0, f64::max))
    }

    /// Checks `||delta||_p <= eps + 1e-9` for every site and sample.
    pub fn check_budgets(&self) -> Result<()> {
        for (site, _) in self.sites() {
            let n = self.max_norm(site);
            if n > self.budgets[site] + BUDGET_TOLERANCE {
                return Err(Error::contract(format!(
                    "site {site}: {} norm {n} exceeds budget {}",
                    self.norm.name(),
                    self.budgets[site]
                )));
            }
        }
        Ok(())
    }

    /// Project every row of every site onto its budget ball.
    pub fn project(&mut self) {
        let norm = self.norm;
        for site in SiteId::ALL {
            let eps = self.budgets[site];
            if let Some(d) = self.deltas[site].as_mut() {
                for r in 0..d.rows() {
                    project_in_place(d.row_mut(r), norm, eps);
                }
            }
        }
    }

    /// Row `r` of every site, as a batch of one.
    pub fn sample(&self, r: usize) -> PerturbationSet {
        let deltas = self.deltas.map(|d| {
            d.as_ref().map(|d| {
                let mut shape = d.shape().to_vec();
                shape[0] = 1;
                Tensor::new(shape, d.row(r).to_vec()).expect("row shape")
            })
        });
        PerturbationSet { deltas, budgets: self.budgets, norm: self.norm }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut out = Writer::new(w);
        out.bytes(MAGIC)?;
        out.u32(VERSION)?;
        out.u8(match self.norm {
            Norm::L1 => 0,
            Norm::L2 => 1,
            Norm::Linf => 2,
        })?;
        out.u8(self.sites().count() as u8)?;
        for (site, d) in self.sites() {
            out.u8(site.index() as u8)?;
            out.f64(self.budgets[site])?;
            out.tensor(d)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut inp = Reader::new(r);
        if &inp.array::<8>()? != MAGIC {
            return Err(Error::format("not a perturbation file"));
        }
        let version = inp.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported perturbation version {version}")));
        }
        let norm = match inp.u8()? {
            0 => Norm::L1,
            1 => Norm::L2,
            2 => Norm::Linf,
            v => return Err(Error::format(format!("bad norm tag {v}"))),
        };
        let mut set = PerturbationSet::empty(norm);
        for _ in 0..inp.u8()? {
            let tag = inp.u8()? as usize;
            let site = *SiteId::ALL.get(tag).ok_or_else(|| Error::format(format!("bad site tag {tag}")))?;
            set.budgets[site] = inp.f64()?;
            let d = inp.tensor()?;
            if d.shape().len() < 2 || d.shape()[1..] != site_shape(site)[..] {
                return Err(Error::format(format!("site {site} has shape {:?}", d.shape())));
            }
            set.deltas[site] = Some(d);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
