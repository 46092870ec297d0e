//! Reference five-module architecture and its per-module losses.
//!
//! | module | body                                              | feature | head            | loss            |
//! |--------|---------------------------------------------------|---------|-----------------|-----------------|
//! | Track  | conv 4->8 s2, relu, conv 8->16 s2, relu, fc, tanh | 64      | 6 positions     | masked MSE      |
//! | Map    | same encoder                                      | 64      | 256 mask logits | BCE with logits |
//! | Motion | concat(128) -> 128 relu -> 64 tanh                | 64      | 18 displacements| masked MSE      |
//! | Occ    | 64 -> 128 relu -> 64 tanh                         | 64      | 192 logits      | BCE with logits |
//! | Plan   | 64 -> 64 relu                                     | -       | 6 waypoints     | MSE             |
//!
//! Convolutions are 3x3 with padding 1. Weights and biases are drawn from
//! `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
//!
//! Heads regress positions in model units `(cells - 16) / 8` and
//! displacements in `cells / 2`, so every head's targets are O(1).

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::pipeline::{ModuleId, ModuleNode, Param, PerModule, Pipeline, SiteId};
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::dataset::Targets;
use super::raster::CHANNELS;
use super::scenario::GRID;

pub const ARCH_TAG: &str = "ma2t-toy-v1";
pub const FEATURE_DIM: usize = 64;
const POSITION_CENTER: f64 = 16.0;
const POSITION_SCALE: f64 = 8.0;
const DISPLACEMENT_SCALE: f64 = 2.0;
const CONV: Conv2dSpec = Conv2dSpec { stride: 2, padding: 1 };
/// Spatial extent after the two stride-2 convolutions.
const ENCODED: usize = GRID / 4;

pub fn position_to_model(cells: f64) -> f64 {
    (cells - POSITION_CENTER) / POSITION_SCALE
}

pub fn position_from_model(v: f64) -> f64 {
    v * POSITION_SCALE + POSITION_CENTER
}

pub fn displacement_to_model(cells: f64) -> f64 {
    cells / DISPLACEMENT_SCALE
}

pub fn displacement_from_model(v: f64) -> f64 {
    v * DISPLACEMENT_SCALE
}

/// Per-sample tensor shape at an injection site.
pub fn site_shape(site: SiteId) -> Vec<usize> {
    match site {
        SiteId::Images => vec![CHANNELS, GRID, GRID],
        _ => vec![FEATURE_DIM],
    }
}

/// `(name, shape, fan_in)` for every parameter of a module, in binding order.
fn layout(id: ModuleId) -> Vec<(&'static str, Vec<usize>, usize)> {
    let encoder = |head: usize| {
        vec![
            ("conv1.weight", vec![8, CHANNELS, 3, 3], CHANNELS * 9),
            ("conv1.bias", vec![8], CHANNELS * 9),
            ("conv2.weight", vec![16, 8, 3, 3], 8 * 9),
            ("conv2.bias", vec![16], 8 * 9),
            ("fc.weight", vec![16 * ENCODED * ENCODED, FEATURE_DIM], 16 * ENCODED * ENCODED),
            ("fc.bias", vec![FEATURE_DIM], 16 * ENCODED * ENCODED),
            ("head.weight", vec![FEATURE_DIM, head], FEATURE_DIM),
            ("head.bias", vec![head], FEATURE_DIM),
        ]
    };
    let mlp = |input: usize, hidden: usize, head: usize| {
        vec![
            ("fc1.weight", vec![input, hidden], input),
            ("fc1.bias", vec![hidden], input),
            ("fc2.weight", vec![hidden, FEATURE_DIM], hidden),
            ("fc2.bias", vec![FEATURE_DIM], hidden),
            ("head.weight", vec![FEATURE_DIM, head], FEATURE_DIM),
            ("head.bias", vec![head], FEATURE_DIM),
        ]
    };
    match id {
        ModuleId::Track => encoder(6),
        ModuleId::Map => encoder(256),
        ModuleId::Motion => mlp(2 * FEATURE_DIM, 128, 18),
        ModuleId::Occ => mlp(FEATURE_DIM, 128, 192),
        ModuleId::Plan => vec![
            ("fc1.weight", vec![FEATURE_DIM, 64], FEATURE_DIM),
            ("fc1.bias", vec![64], FEATURE_DIM),
            ("head.weight", vec![64, 6], 64),
            ("head.bias", vec![6], 64),
        ],
    }
}

/// Total number of scalar parameters in the reference model.
pub const PARAMETER_COUNT: usize = 210_702;

pub fn build_reference_model(seed: u64) -> Pipeline {
    let mut rng = SeededRng::new(seed, Stream::Init);
    let modules = ModuleId::ALL
        .into_iter()
        .map(|id| {
            let params = layout(id)
                .into_iter()
                .map(|(name, shape, fan_in)| {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
                    Param { name: name.to_string(), value: Tensor::new(shape, data).expect("layout shape") }
                })
                .collect();
            ModuleNode { id, params, frozen: false }
        })
        .collect();
    Pipeline { arch: ARCH_TAG.to_string(), modules }
}

/// Check that a pipeline has exactly the reference layout.
pub fn check_architecture(p: &Pipeline) -> Result<()> {
    if p.arch != ARCH_TAG || p.modules.len() != 5 {
        return Err(Error::contract(format!("architecture `{}` is not {ARCH_TAG}", p.arch)));
    }
    for (id, m) in ModuleId::ALL.into_iter().zip(&p.modules) {
        let want = layout(id);
        if m.id != id || m.params.len() != want.len() {
            return Err(Error::contract(format!("module {id} does not match {ARCH_TAG}")));
        }
        for (param, (name, shape, _)) in m.params.iter().zip(want) {
            if param.name != name || param.value.shape() != shape.as_slice() {
                return Err(Error::contract(format!("parameter {id}.{} does not match {ARCH_TAG}", param.name)));
            }
        }
    }
    Ok(())
}

fn encoder(tape: &mut Tape, p: &[Var], x: Var) -> Result<(Var, Var)> {
    let h = tape.conv2d(x, p[0], p[1], CONV)?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, p[2], p[3], CONV)?;
    let h = tape.relu(h)?;
    let h = tape.flatten(h)?;
    let h = tape.linear(h, p[4], p[5])?;
    let feature = tape.tanh(h)?;
    let head = tape.linear(feature, p[6], p[7])?;
    Ok((feature, head))
}

fn mlp(tape: &mut Tape, p: &[Var], x: Var) -> Result<(Var, Var)> {
    let h = tape.linear(x, p[0], p[1])?;
    let h = tape.relu(h)?;
    let h = tape.linear(h, p[2], p[3])?;
    let feature = tape.tanh(h)?;
    let head = tape.linear(feature, p[4], p[5])?;
    Ok((feature, head))
}

/// Run one module. Returns `(feature passed downstream, head output)`;
/// Plan has no downstream consumer and returns its head twice.
pub fn module_forward(id: ModuleId, tape: &mut Tape, params: &[Var], inputs: &[Var]) -> Result<(Var, Var)> {
    match (id, inputs) {
        (ModuleId::Track | ModuleId::Map, &[x]) => encoder(tape, params, x),
        (ModuleId::Motion, &[track, map]) => {
            let x = tape.concat(&[track, map])?;
            mlp(tape, params, x)
        }
        (ModuleId::Occ, &[x]) => mlp(tape, params, x),
        (ModuleId::Plan, &[x]) => {
            let h = tape.linear(x, params[0], params[1])?;
            let h = tape.relu(h)?;
            let head = tape.linear(h, params[2], params[3])?;
            Ok((head, head))
        }
        _ => Err(Error::contract(format!("module {id} got {} inputs", inputs.len()))),
    }
}

/// Per-sample loss `[B]` of one module's head.
pub fn module_loss(id: ModuleId, tape: &mut Tape, head: Var, t: &Targets) -> Result<Var> {
    match id {
        ModuleId::Track => tape.mse_rows(head, &t.track, Some(&t.track_mask)),
        ModuleId::Map => tape.bce_rows(head, &t.map),
        ModuleId::Motion => tape.mse_rows(head, &t.motion, Some(&t.motion_mask)),
        ModuleId::Occ => tape.bce_rows(head, &t.occ),
        ModuleId::Plan => tape.mse_rows(head, &t.plan, None),
    }
}

/// Parameter counts per module, computed from the layout table.
pub fn parameter_counts() -> PerModule<usize> {
    PerModule::from_fn(|id| layout(id).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum())
}
