//! FGSM, MI-FGSM and PGD over the pipeline's injection sites.

use log::warn;

use super::project::{project_in_place, Norm};
use super::{AttackConfig, AttackMethod, Objective, PerturbationSet};
use crate::autodiff::{sign, Tape, Var};
use crate::pipeline::{weighted_rows, ModuleId, PerModule, PerSite, Pipeline, SiteId};
use crate::rng::{SeededRng, Stream};
use crate::task::dataset::Batch;
use crate::task::model::site_shape;
use crate::tensor::Tensor;
use crate::Result;

/// Result of one attack on a batch.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub perturbation: PerturbationSet,
    /// Per-sample selection objective at the returned perturbation.
    pub objective: Vec<f64>,
    /// Number of (step, site, sample) gradients that were identically zero
    /// or too small to normalize.
    pub zero_gradient_events: usize,
}

/// Loss weights selecting which modules an objective covers.
fn objective_weights(objective: Objective, site: SiteId) -> PerModule<f64> {
    match objective {
        Objective::TotalLoss => PerModule::ones(),
        Objective::PlanLoss => PerModule::from_fn(|m| f64::from(u8::from(m == ModuleId::Plan))),
        Objective::SubLoss => PerModule::from_fn(|m| f64::from(u8::from(m == site.nearest_module()))),
    }
}

/// A differentiable per-sample objective over perturbation tensors, one per
/// active site, each shaped `[batch, ..]`.
pub trait LossSurface {
    fn batch_len(&self) -> usize;

    /// Per-sample shape of the perturbation at `site`.
    fn site_shape(&self, site: SiteId) -> Vec<usize>;

    /// Per-sample selection objective and, when `with_grad`, each active
    /// site's gradient of the objective that site ascends.
    fn evaluate(&self, deltas: &PerSite<Option<Tensor>>, with_grad: bool) -> Result<(Vec<f64>, PerSite<Option<Tensor>>)>;
}

/// The pipeline's module losses on one batch, grouped per site by objective.
struct PipelineSurface<'a> {
    pipeline: &'a Pipeline,
    batch: &'a Batch,
    sites: Vec<SiteId>,
    /// Sites sharing one objective, each with its module weights.
    groups: Vec<(PerModule<f64>, Vec<SiteId>)>,
    /// Objective used to rank iterates and restarts.
    selection: PerModule<f64>,
}

impl<'a> PipelineSurface<'a> {
    fn new(pipeline: &'a Pipeline, batch: &'a Batch, cfg: &AttackConfig) -> Self {
        let sites = cfg.active_sites();
        let mut groups: Vec<(PerModule<f64>, Vec<SiteId>)> = Vec::new();
        for &s in &sites {
            let w = objective_weights(cfg.objective, s);
            match groups.iter_mut().find(|(g, _)| *g == w) {
                Some((_, members)) => members.push(s),
                None => groups.push((w, vec![s])),
            }
        }
        let selection = PerModule::from_fn(|m| {
            let covered = groups.iter().any(|(w, _)| w[m] > 0.0);
            f64::from(u8::from(covered))
        });
        Self { pipeline, batch, sites, groups, selection }
    }
}

impl LossSurface for PipelineSurface<'_> {
    fn batch_len(&self) -> usize {
        self.batch.len()
    }

    fn site_shape(&self, site: SiteId) -> Vec<usize> {
        site_shape(site)
    }

    fn evaluate(&self, deltas: &PerSite<Option<Tensor>>, with_grad: bool) -> Result<(Vec<f64>, PerSite<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let params = self.pipeline.bind(&mut tape, false)?;
        let mut vars = PerSite::<Option<Var>>::default();
        for &s in &self.sites {
            let d = deltas[s].clone().expect("active site has a delta");
            vars[s] = Some(tape.leaf(d, with_grad)?);
        }
        let trace = self.pipeline.trace(&mut tape, &params, self.batch, &vars)?;
        let selected = weighted_rows(&mut tape, &trace.loss_rows, &self.selection)?;
        let objective = tape.value(selected).data().to_vec();
        let mut grads = PerSite::default();
        if with_grad {
            for (weights, members) in &self.groups {
                let rows = weighted_rows(&mut tape, &trace.loss_rows, weights)?;
                let total = tape.sum(rows)?;
                let mut g = tape.backward(total)?;
                for &s in members {
                    let v = vars[s].expect("bound");
                    let mut shape = vec![self.batch.len()];
                    shape.extend(site_shape(s));
                    grads[s] = Some(g.take(v).unwrap_or_else(|| Tensor::zeros(&shape)));
                }
            }
        }
        Ok((objective, grads))
    }
}

struct Problem<'a> {
    surface: &'a dyn LossSurface,
    norm: Norm,
    budgets: PerSite<f64>,
    sites: Vec<SiteId>,
}

impl<'a> Problem<'a> {
    fn new(surface: &'a dyn LossSurface, cfg: &AttackConfig) -> Self {
        Self { surface, norm: cfg.norm, budgets: cfg.budgets, sites: cfg.active_sites() }
    }

    fn shape(&self, site: SiteId) -> Vec<usize> {
        let mut s = vec![self.surface.batch_len()];
        s.extend(self.surface.site_shape(site));
        s
    }

    fn zeros(&self) -> PerSite<Option<Tensor>> {
        let mut d = PerSite::default();
        for &s in &self.sites {
            d[s] = Some(Tensor::zeros(&self.shape(s)));
        }
        d
    }

    fn evaluate(&self, deltas: &PerSite<Option<Tensor>>, with_grad: bool) -> Result<(Vec<f64>, PerSite<Option<Tensor>>)> {
        self.surface.evaluate(deltas, with_grad)
    }

    fn project(&self, deltas: &mut PerSite<Option<Tensor>>) {
        for &s in &self.sites {
            let d = deltas[s].as_mut().expect("active");
            for r in 0..d.rows() {
                project_in_place(d.row_mut(r), self.norm, self.budgets[s]);
            }
        }
    }

    fn random_start(&self, rng: &mut SeededRng) -> PerSite<Option<Tensor>> {
        let mut d = self.zeros();
        for &s in &self.sites {
            let eps = self.budgets[s];
            for v in d[s].as_mut().expect("active").data_mut() {
                *v = rng.uniform(-eps, eps);
            }
        }
        self.project(&mut d);
        d
    }

    fn finish(&self, deltas: PerSite<Option<Tensor>>, objective: Vec<f64>, zero_gradient_events: usize) -> AttackOutcome {
        let mut budgets = PerSite([0.0; 5]);
        for &s in &self.sites {
            budgets[s] = self.budgets[s];
        }
        AttackOutcome {
            perturbation: PerturbationSet { deltas, budgets, norm: self.norm },
            objective,
            zero_gradient_events,
        }
    }
}

/// Steepest-ascent direction of one gradient row under `norm`.
/// Returns `None` when the row carries no usable gradient.
fn ascent_direction(norm: Norm, g: &[f64]) -> Option<Vec<f64>> {
    match norm {
        Norm::Linf => {
            if g.iter().all(|&v| v == 0.0) {
                None
            } else {
                Some(g.iter().map(|&v| sign(v)).collect())
            }
        }
        Norm::L2 | Norm::L1 => {
            let n = norm.of(g);
            if n < 1e-12 {
                None
            } else {
                Some(g.iter().map(|&v| v / n).collect())
            }
        }
    }
}

fn empty_outcome(cfg: &AttackConfig, n: usize) -> AttackOutcome {
    AttackOutcome {
        perturbation: PerturbationSet::empty(cfg.norm),
        objective: vec![0.0; n],
        zero_gradient_events: 0,
    }
}

fn report_zero_gradients(name: &str, events: usize) {
    if events > 0 {
        warn!("{name}: {events} zero-gradient site updates");
    }
}

/// Single step `delta = eps * sign(grad)` at `delta = 0`, then projected.
pub fn fgsm(pipeline: &Pipeline, batch: &Batch, cfg: &AttackConfig) -> Result<AttackOutcome> {
    fgsm_on(&PipelineSurface::new(pipeline, batch, cfg), cfg)
}

fn fgsm_on(surface: &dyn LossSurface, cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let problem = Problem::new(surface, cfg);
    if problem.sites.is_empty() {
        return Ok(empty_outcome(cfg, surface.batch_len()));
    }
    let mut deltas = problem.zeros();
    let (_, grads) = problem.evaluate(&deltas, true)?;
    let mut events = 0;
    for &s in &problem.sites {
        let eps = cfg.budgets[s];
        let g = grads[s].as_ref().expect("gradient");
        let d = deltas[s].as_mut().expect("active");
        for r in 0..d.rows() {
            if g.row(r).iter().all(|&v| v == 0.0) {
                events += 1;
            }
            for (x, &gv) in d.row_mut(r).iter_mut().zip(g.row(r)) {
                *x = eps * sign(gv);
            }
        }
    }
    problem.project(&mut deltas);
    report_zero_gradients("fgsm", events);
    let (objective, _) = problem.evaluate(&deltas, false)?;
    Ok(problem.finish(deltas, objective, events))
}

/// Momentum iterative FGSM from `delta = 0`; returns the final iterate.
pub fn mifgsm(pipeline: &Pipeline, batch: &Batch, cfg: &AttackConfig) -> Result<AttackOutcome> {
    mifgsm_on(&PipelineSurface::new(pipeline, batch, cfg), cfg)
}

fn mifgsm_on(surface: &dyn LossSurface, cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let problem = Problem::new(surface, cfg);
    if problem.sites.is_empty() {
        return Ok(empty_outcome(cfg, surface.batch_len()));
    }
    let mut deltas = problem.zeros();
    let mut momentum = problem.zeros();
    let mut events = 0;
    for _ in 0..cfg.steps {
        let (_, grads) = problem.evaluate(&deltas, true)?;
        for &s in &problem.sites {
            let step = cfg.step_for(s);
            let g = grads[s].as_ref().expect("gradient");
            let m = momentum[s].as_mut().expect("active");
            let d = deltas[s].as_mut().expect("active");
            for r in 0..d.rows() {
                let grow = g.row(r);
                let l1 = Norm::L1.of(grow);
                let scale = if l1 < 1e-12 {
                    events += 1;
                    1.0
                } else {
                    1.0 / l1
                };
                for (mv, &gv) in m.row_mut(r).iter_mut().zip(grow) {
                    *mv = cfg.momentum * *mv + gv * scale;
                }
                for (x, &mv) in d.row_mut(r).iter_mut().zip(m.row(r)) {
                    *x += step * sign(mv);
                }
            }
        }
        problem.project(&mut deltas);
    }
    report_zero_gradients("mifgsm", events);
    let (objective, _) = problem.evaluate(&deltas, false)?;
    Ok(problem.finish(deltas, objective, events))
}

/// Projected gradient ascent with random restarts.
///
/// Each restart starts from a uniform draw in `[-eps, eps]` per coordinate,
/// projected. The returned perturbation is, per sample, the best iterate
/// seen across all steps (including the start) and all restarts.
pub fn pgd(pipeline: &Pipeline, batch: &Batch, cfg: &AttackConfig) -> Result<AttackOutcome> {
    pgd_on(&PipelineSurface::new(pipeline, batch, cfg), cfg)
}

fn pgd_on(surface: &dyn LossSurface, cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let problem = Problem::new(surface, cfg);
    if problem.sites.is_empty() {
        return Ok(empty_outcome(cfg, surface.batch_len()));
    }
    let n = surface.batch_len();
    let mut best = problem.zeros();
    let mut best_obj = vec![f64::NEG_INFINITY; n];
    let mut events = 0;
    for restart in 0..cfg.restarts {
        let mut rng = SeededRng::derived(cfg.seed, Stream::Attack, restart as u64);
        let mut deltas = problem.random_start(&mut rng);
        for t in 0..=cfg.steps {
            let want_grad = t < cfg.steps;
            let (obj, grads) = problem.evaluate(&deltas, want_grad)?;
            for r in 0..n {
                if obj[r] <= best_obj[r] {
                    continue;
                }
                best_obj[r] = obj[r];
                for &s in &problem.sites {
                    let src = deltas[s].as_ref().expect("active").row(r).to_vec();
                    best[s].as_mut().expect("active").row_mut(r).copy_from_slice(&src);
                }
            }
            if !want_grad {
                break;
            }
            for &s in &problem.sites {
                let step = cfg.step_for(s);
                let g = grads[s].as_ref().expect("gradient");
                let d = deltas[s].as_mut().expect("active");
                for r in 0..n {
                    match ascent_direction(cfg.norm, g.row(r)) {
                        Some(dir) => {
                            for (x, v) in d.row_mut(r).iter_mut().zip(dir) {
                                *x += step * v;
                            }
                        }
                        None => events += 1,
                    }
                }
            }
            problem.project(&mut deltas);
        }
    }
    report_zero_gradients("pgd", events);
    Ok(problem.finish(best, best_obj, events))
}

/// Dispatch on `cfg.method`.
pub fn attack(pipeline: &Pipeline, batch: &Batch, cfg: &AttackConfig) -> Result<AttackOutcome> {
    attack_surface(&PipelineSurface::new(pipeline, batch, cfg), cfg)
}

/// Runs `cfg.method` against an arbitrary objective. The objective group is
/// whatever `surface` computes; `cfg.objective` is not consulted.
pub fn attack_surface(surface: &dyn LossSurface, cfg: &AttackConfig) -> Result<AttackOutcome> {
    match cfg.method {
        AttackMethod::Fgsm => fgsm_on(surface, cfg),
        AttackMethod::Mifgsm => mifgsm_on(surface, cfg),
        AttackMethod::Pgd => pgd_on(surface, cfg),
    }
}

/// Joint attack on every budgeted site against the unit-weighted total loss.
pub fn module_wise_attack(pipeline: &Pipeline, batch: &Batch, cfg: &AttackConfig) -> Result<AttackOutcome> {
    attack(pipeline, batch, &cfg.clone().with_objective(Objective::TotalLoss))
}

/// Each site ascends the loss of the module that consumes it.
pub fn sub_loss_attack(pipeline: &Pipeline, batch: &Batch, cfg: &AttackConfig) -> Result<AttackOutcome> {
    attack(pipeline, batch, &cfg.clone().with_objective(Objective::SubLoss))
}

/// Every site ascends the Plan loss.
pub fn plan_targeted_attack(pipeline: &Pipeline, batch: &Batch, cfg: &AttackConfig) -> Result<AttackOutcome> {
    attack(pipeline, batch, &cfg.clone().with_objective(Objective::PlanLoss))
}

/// Uniform per-coordinate noise in `[-eps, eps]`, projected onto each site's ball.
pub fn random_perturbation(batch_size: usize, budgets: &PerSite<f64>, norm: Norm, seed: u64) -> PerturbationSet {
    let mut rng = SeededRng::new(seed, Stream::Attack);
    let mut set = PerturbationSet::empty(norm);
    for site in SiteId::ALL {
        let eps = budgets[site];
        if eps <= 0.0 {
            continue;
        }
        let mut shape = vec![batch_size];
        shape.extend(site_shape(site));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-eps, eps)).collect();
        set.deltas[site] = Some(Tensor::new(shape, data).expect("site shape"));
        set.budgets[site] = eps;
    }
    set.project();
    set
}
