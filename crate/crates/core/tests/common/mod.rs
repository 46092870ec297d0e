#![allow(dead_code)]

use ma2t::attacks::LossSurface;
use ma2t::autodiff::{Conv2dSpec, Tape, Var};
use ma2t::gradcheck::grad_check;
use ma2t::pipeline::{BoundParams, PerModule, PerSite, Pipeline, SiteId};
use ma2t::rng::{mix_seed, seeded_random, Distribution};
use ma2t::task::dataset::Batch;
use ma2t::task::model::site_shape;
use ma2t::tensor::Tensor;
use ma2t::Result;

pub const H: f64 = 1e-5;

pub fn uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    seeded_random(seed, shape, Distribution::Uniform { lo, hi }).unwrap()
}

/// `sum(y * w)` for a fixed random `w`, so no coordinate's gradient cancels by symmetry.
fn readout(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(uniform(seed, t.shape(y), -1.0, 1.0))?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn binary(seed: u64, shape: &[usize]) -> Tensor {
    uniform(seed, shape, 0.0, 1.0).map(|v| if v < 0.5 { 0.0 } else { 1.0 })
}

type Check = fn(u64) -> Result<f64>;

macro_rules! unary {
    ($shape:expr, |$t:ident, $x:ident, $s:ident| $body:expr) => {{
        fn check(seed: u64) -> Result<f64> {
            let x0 = uniform(seed, &$shape, -1.0, 1.0);
            grad_check(
                |$t: &mut Tape, $x: Var| {
                    let $s = seed;
                    let y = $body?;
                    readout($t, y, mix_seed($s, 99))
                },
                &x0,
                H,
            )
        }
        check as Check
    }};
}

/// Scalar-valued functions returning a scalar directly.
macro_rules! scalar {
    ($shape:expr, |$t:ident, $x:ident, $s:ident| $body:expr) => {{
        fn check(seed: u64) -> Result<f64> {
            let x0 = uniform(seed, &$shape, -1.0, 1.0);
            grad_check(
                |$t: &mut Tape, $x: Var| {
                    let $s = seed;
                    $body
                },
                &x0,
                H,
            )
        }
        check as Check
    }};
}

/// Every differentiable primitive, one check per argument position. Each
/// check draws its inputs in [-1, 1] from the given seed and returns the
/// maximum relative error.
pub fn primitive_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("add", unary!([3, 4], |t, x, s| {
            let b = t.constant(uniform(mix_seed(s, 1), &[3, 4], -1.0, 1.0))?;
            t.add(x, b)
        })),
        ("sub.lhs", unary!([3, 4], |t, x, s| {
            let b = t.constant(uniform(mix_seed(s, 1), &[3, 4], -1.0, 1.0))?;
            t.sub(x, b)
        })),
        ("sub.rhs", unary!([3, 4], |t, x, s| {
            let a = t.constant(uniform(mix_seed(s, 1), &[3, 4], -1.0, 1.0))?;
            t.sub(a, x)
        })),
        ("mul", unary!([3, 4], |t, x, s| {
            let b = t.constant(uniform(mix_seed(s, 1), &[3, 4], -1.0, 1.0))?;
            t.mul(x, b)
        })),
        ("mul.self", unary!([5], |t, x, _s| t.mul(x, x))),
        ("scale", unary!([6], |t, x, _s| t.scale(x, -2.5))),
        ("matmul.lhs", unary!([3, 5], |t, x, s| {
            let b = t.constant(uniform(mix_seed(s, 1), &[5, 2], -1.0, 1.0))?;
            t.matmul(x, b)
        })),
        ("matmul.rhs", unary!([5, 2], |t, x, s| {
            let a = t.constant(uniform(mix_seed(s, 1), &[3, 5], -1.0, 1.0))?;
            t.matmul(a, x)
        })),
        ("add_bias.x", unary!([3, 4], |t, x, s| {
            let b = t.constant(uniform(mix_seed(s, 1), &[4], -1.0, 1.0))?;
            t.add_bias(x, b)
        })),
        ("add_bias.bias", unary!([4], |t, x, s| {
            let a = t.constant(uniform(mix_seed(s, 1), &[3, 4], -1.0, 1.0))?;
            t.add_bias(a, x)
        })),
        ("linear.weight", unary!([4, 3], |t, x, s| {
            let a = t.constant(uniform(mix_seed(s, 1), &[2, 4], -1.0, 1.0))?;
            let b = t.constant(uniform(mix_seed(s, 2), &[3], -1.0, 1.0))?;
            t.linear(a, x, b)
        })),
        ("conv2d.input", unary!([2, 2, 5, 5], |t, x, s| {
            let w = t.constant(uniform(mix_seed(s, 1), &[3, 2, 3, 3], -1.0, 1.0))?;
            let b = t.constant(uniform(mix_seed(s, 2), &[3], -1.0, 1.0))?;
            t.conv2d(x, w, b, Conv2dSpec { stride: 1, padding: 1 })
        })),
        ("conv2d.weight", unary!([3, 2, 3, 3], |t, x, s| {
            let i = t.constant(uniform(mix_seed(s, 1), &[2, 2, 6, 6], -1.0, 1.0))?;
            let b = t.constant(uniform(mix_seed(s, 2), &[3], -1.0, 1.0))?;
            t.conv2d(i, x, b, Conv2dSpec { stride: 2, padding: 1 })
        })),
        ("conv2d.bias", unary!([3], |t, x, s| {
            let i = t.constant(uniform(mix_seed(s, 1), &[1, 2, 5, 5], -1.0, 1.0))?;
            let w = t.constant(uniform(mix_seed(s, 2), &[3, 2, 3, 3], -1.0, 1.0))?;
            t.conv2d(i, w, x, Conv2dSpec { stride: 2, padding: 0 })
        })),
        ("relu", unary!([10], |t, x, _s| t.relu(x))),
        ("tanh", unary!([10], |t, x, _s| t.tanh(x))),
        ("sigmoid", unary!([10], |t, x, _s| t.sigmoid(x))),
        ("reshape", unary!([2, 6], |t, x, _s| t.reshape(x, &[3, 4]))),
        ("flatten", unary!([2, 2, 3], |t, x, _s| t.flatten(x))),
        ("concat", unary!([2, 3], |t, x, s| {
            let b = t.constant(uniform(mix_seed(s, 1), &[2, 2], -1.0, 1.0))?;
            t.concat(&[b, x, x])
        })),
        ("slice", unary!([3, 6], |t, x, _s| t.slice(x, 1, 4))),
        ("sum", scalar!([7], |t, x, _s| t.sum(x))),
        ("mean", scalar!([7], |t, x, _s| {
            let y = t.tanh(x)?;
            t.mean(y)
        })),
        ("mse_rows", unary!([3, 4], |t, x, s| {
            let target = uniform(mix_seed(s, 1), &[3, 4], -1.0, 1.0);
            let mut mask = binary(mix_seed(s, 2), &[3, 4]);
            mask.data_mut()[0] = 1.0;
            t.mse_rows(x, &target, Some(&mask))
        })),
        ("mse_loss", scalar!([3, 4], |t, x, s| {
            let target = uniform(mix_seed(s, 1), &[3, 4], -1.0, 1.0);
            t.mse_loss(x, &target)
        })),
        ("bce_rows", unary!([3, 4], |t, x, s| t.bce_rows(x, &binary(mix_seed(s, 1), &[3, 4])))),
        ("bce_with_logits_loss", scalar!([3, 4], |t, x, s| t.bce_with_logits_loss(x, &binary(mix_seed(s, 1), &[3, 4])))),
        ("l1_norm", scalar!([6], |t, x, _s| t.l1_norm(x))),
        ("l2_norm", scalar!([6], |t, x, _s| t.l2_norm(x))),
        ("sign", unary!([6], |t, x, _s| t.sign(x))),
        ("clamp", unary!([10], |t, x, _s| t.clamp(x, -0.5, 0.5))),
    ]
}

/// Relative error of the directional derivative of the total pipeline loss
/// `g(s) = L(theta + s u, delta + s v)` at `s = 0`, where `u` spans every
/// parameter and `v` every injection site, both uniform in [-1, 1] and
/// scaled down so ReLU kinks are rarely crossed within `+-h`.
///
/// The observation is replaced by values in [0.1, 0.9] so the image clamp
/// is differentiable at `s = 0`.
pub fn pipeline_directional_error(pipeline: &Pipeline, batch: &Batch, seed: u64) -> Result<f64> {
    let b = batch.len();
    let obs = uniform(mix_seed(seed, 1), batch.obs.shape(), 0.1, 0.9);
    let batch = batch.with_obs(obs)?;
    let param_dirs: Vec<Tensor> = pipeline
        .params()
        .enumerate()
        .map(|(i, (_, p))| uniform(mix_seed(seed, 100 + i as u64), p.value.shape(), -1.0, 1.0).scale(3e-3))
        .collect();
    let site_dirs: PerSite<Tensor> = PerSite::from_fn(|s| {
        let mut shape = vec![b];
        shape.extend(site_shape(s));
        let scale = if s == SiteId::Images { 0.015 } else { 0.15 };
        uniform(mix_seed(seed, 10 + s.index() as u64), &shape, -1.0, 1.0).scale(scale)
    });
    let f = |t: &mut Tape, s: Var| -> Result<Var> {
        let mut vars = PerModule::<Vec<Var>>::default();
        let mut k = 0;
        for (id, p) in pipeline.params() {
            let base = t.constant(p.value.clone())?;
            let dir = t.constant(param_dirs[k].clone())?;
            let ones = t.constant(Tensor::ones(p.value.shape()))?;
            let step = scaled_by(t, dir, ones, s)?;
            vars[id].push(t.add(base, step)?);
            k += 1;
        }
        let params = BoundParams::new(vars);
        let mut noise = PerSite::<Option<Var>>::default();
        for site in SiteId::ALL {
            let dir = t.constant(site_dirs[site].clone())?;
            let ones = t.constant(Tensor::ones(site_dirs[site].shape()))?;
            noise[site] = Some(scaled_by(t, dir, ones, s)?);
        }
        let trace = pipeline.trace(t, &params, &batch, &noise)?;
        let mut total = None;
        for id in ma2t::pipeline::ModuleId::ALL {
            let m = t.mean(trace.loss_rows[id])?;
            total = Some(match total {
                None => m,
                Some(acc) => t.add(acc, m)?,
            });
        }
        Ok(total.expect("five modules"))
    };
    grad_check(f, &Tensor::scalar(0.0), H)
}

/// `dir * s` with the scalar `s` broadcast through `ones`.
fn scaled_by(t: &mut Tape, dir: Var, ones: Var, s: Var) -> Result<Var> {
    let flat_ones = t.reshape(ones, &[t.shape(ones).iter().product(), 1])?;
    let s_row = t.reshape(s, &[1, 1])?;
    let broadcast = t.matmul(flat_ones, s_row)?;
    let shape = t.shape(dir).to_vec();
    let broadcast = t.reshape(broadcast, &shape)?;
    t.mul(dir, broadcast)
}

/// Exact Euclidean projection onto the l1 ball by enumerating every face:
/// for each support `S` (signs fixed to those of `v`), the closest point of
/// `{sum_S |x_i| = eps}` is `v_S - tau sign(v_S)`; the answer is the nearest
/// feasible candidate, or `v` itself when already inside. Dimension <= 12.
pub fn l1_projection_oracle(v: &[f64], eps: f64) -> Vec<f64> {
    let n = v.len();
    assert!(n <= 12);
    if v.iter().map(|x| x.abs()).sum::<f64>() <= eps {
        return v.to_vec();
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for support in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| support & (1 << i) != 0).collect();
        let tau = (members.iter().map(|&i| v[i].abs()).sum::<f64>() - eps) / members.len() as f64;
        let mut x = vec![0.0; n];
        let mut feasible = true;
        for &i in &members {
            let m = v[i].abs() - tau;
            if m < -1e-15 {
                feasible = false;
                break;
            }
            x[i] = m.max(0.0) * v[i].signum();
        }
        if !feasible {
            continue;
        }
        let d: f64 = x.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
            best = Some((d, x));
        }
    }
    best.expect("some face is feasible").1
}

/// Nearest point of the l1 ball in 2-d found by scanning a grid of spacing `res`.
pub fn l1_projection_grid_2d(v: [f64; 2], eps: f64, res: f64) -> [f64; 2] {
    let k = (eps / res).round() as i64;
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    for i in -k..=k {
        let x = i as f64 * res;
        let rem = k - i.abs();
        for j in -rem..=rem {
            let y = j as f64 * res;
            let d = (x - v[0]).powi(2) + (y - v[1]).powi(2);
            if d < best.0 {
                best = (d, [x, y]);
            }
        }
    }
    best.1
}

/// `L(delta) = |A (delta - c)|^2` with `delta` at the Images site, one 2-vector per row.
pub struct Quadratic {
    pub a: [[f64; 2]; 2],
    pub c: [f64; 2],
}

impl Quadratic {
    pub fn random(seed: u64) -> Self {
        let t = uniform(seed, &[4], -1.0, 1.0);
        let d = t.data();
        Self { a: [[d[0], d[1]], [d[2], d[3]]], c: [0.0, 0.0] }
    }

    fn residual(&self, d: [f64; 2]) -> [f64; 2] {
        let d = [d[0] - self.c[0], d[1] - self.c[1]];
        [self.a[0][0] * d[0] + self.a[0][1] * d[1], self.a[1][0] * d[0] + self.a[1][1] * d[1]]
    }

    pub fn loss(&self, d: [f64; 2]) -> f64 {
        let [y0, y1] = self.residual(d);
        y0 * y0 + y1 * y1
    }

    /// Maximum over the `(n x n)` grid covering the l-infinity box of radius `eps`.
    pub fn grid_max(&self, eps: f64, n: usize) -> f64 {
        let at = |i: usize| -eps + 2.0 * eps * i as f64 / (n - 1) as f64;
        (0..n).flat_map(|i| (0..n).map(move |j| (at(i), at(j)))).map(|(x, y)| self.loss([x, y])).fold(f64::MIN, f64::max)
    }
}

impl LossSurface for Quadratic {
    fn batch_len(&self) -> usize {
        1
    }

    fn site_shape(&self, _site: SiteId) -> Vec<usize> {
        vec![2]
    }

    fn evaluate(&self, deltas: &PerSite<Option<Tensor>>, with_grad: bool) -> Result<(Vec<f64>, PerSite<Option<Tensor>>)> {
        let d = deltas[SiteId::Images].as_ref().expect("images delta").data();
        let d = [d[0], d[1]];
        let mut grads = PerSite::default();
        if with_grad {
            let a = self.a;
            let y = self.residual(d);
            let g = [2.0 * (a[0][0] * y[0] + a[1][0] * y[1]), 2.0 * (a[0][1] * y[0] + a[1][1] * y[1])];
            grads[SiteId::Images] = Some(Tensor::new(vec![1, 2], g.to_vec())?);
        }
        Ok((vec![self.loss(d)], grads))
    }
}
