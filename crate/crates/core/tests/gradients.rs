mod common;

use common::{pipeline_directional_error, primitive_checks, uniform};
use ma2t::autodiff::Tape;
use ma2t::pipeline::PerSite;
use ma2t::task::dataset::{Batch, Dataset, DatasetConfig};
use ma2t::task::model::build_reference_model;

fn small_batch(n: usize) -> Batch {
    let d = Dataset::generate(&DatasetConfig { n_scenarios: 10, seed: 3, ..DatasetConfig::default() }).unwrap();
    d.train.head(n).batches(n).unwrap().remove(0)
}

#[test]
fn every_primitive_matches_central_differences() {
    for (name, check) in primitive_checks() {
        for seed in 0..10 {
            let err = check(seed).unwrap();
            assert!(err < 1e-4, "{name} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn pipeline_loss_matches_central_differences() {
    let batch = small_batch(2);
    for seed in 0..4 {
        let p = build_reference_model(seed);
        let err = pipeline_directional_error(&p, &batch, seed).unwrap();
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn backward_is_linear() {
    let x0 = uniform(5, &[4, 3], -1.0, 1.0);
    let grad_of = |a: f64, b: f64| {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone(), true).unwrap();
        let f = t.tanh(x).unwrap();
        let f = t.sum(f).unwrap();
        let sq = t.mul(x, x).unwrap();
        let g = t.mean(sq).unwrap();
        let fa = t.scale(f, a).unwrap();
        let gb = t.scale(g, b).unwrap();
        let y = t.add(fa, gb).unwrap();
        t.backward(y).unwrap().get(x).unwrap().clone()
    };
    let (gf, gg, gc) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(2.0, -3.0));
    for i in 0..gc.len() {
        let expect = 2.0 * gf.data()[i] - 3.0 * gg.data()[i];
        assert!((gc.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn repeated_passes_give_identical_gradients() {
    let p = build_reference_model(1);
    let batch = small_batch(3);
    let grads = || {
        let mut t = Tape::new();
        let params = p.bind(&mut t, true).unwrap();
        let trace = p.trace(&mut t, &params, &batch, &PerSite::default()).unwrap();
        let loss = t.mean(trace.loss_rows[ma2t::pipeline::ModuleId::Plan]).unwrap();
        let g = t.backward(loss).unwrap();
        let first = params.module(ma2t::pipeline::ModuleId::Track)[0];
        g.get(first).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(grads(), grads());
}
