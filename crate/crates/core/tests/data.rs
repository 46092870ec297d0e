use ma2t::attacks::{random_perturbation, Norm, PerturbationSet};
use ma2t::pipeline::PerSite;
use ma2t::task::dataset::{Dataset, DatasetConfig, Split};
use ma2t::task::raster::rasterize;
use ma2t::task::scenario::expert_plan;

fn cfg(seed: u64) -> DatasetConfig {
    DatasetConfig { n_scenarios: 40, seed, ..DatasetConfig::default() }
}

fn bytes(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    d.write_to(&mut out).unwrap();
    out
}

#[test]
fn dataset_round_trips_bit_exactly() {
    let splits = Dataset::generate(&cfg(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for d in [&splits.train, &splits.val] {
        let path = dir.path().join("d.ds");
        d.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(&back, d);
        assert_eq!(bytes(&back), std::fs::read(&path).unwrap());
    }
}

#[test]
fn generation_is_deterministic_and_seeded() {
    let a = Dataset::generate(&cfg(5)).unwrap();
    let b = Dataset::generate(&cfg(5)).unwrap();
    let c = Dataset::generate(&cfg(6)).unwrap();
    assert_eq!(bytes(&a.train), bytes(&b.train));
    assert_ne!(bytes(&a.train), bytes(&c.train));
    assert_eq!((a.train.len(), a.val.len()), (32, 8));
    assert_eq!((a.train.split, a.val.split), (Split::Train, Split::Val));
}

#[test]
fn samples_are_consistent_with_their_scenarios() {
    let d = Dataset::generate(&cfg(2)).unwrap().train;
    for s in &d.samples {
        s.scenario.validate().unwrap();
        assert_eq!(rasterize(&s.scenario).raster, s.obs);
        let plan = expert_plan(&s.scenario).unwrap();
        for (p, l) in plan.iter().zip(&s.labels.expert_waypoints) {
            assert_eq!([p.x, p.y], *l);
        }
    }
}

#[test]
fn truncated_or_foreign_files_are_rejected() {
    let d = Dataset::generate(&cfg(1)).unwrap().val;
    let good = bytes(&d);
    assert!(Dataset::read_from(&mut &good[..good.len() / 2]).is_err());
    let mut foreign = good.clone();
    foreign[..8].copy_from_slice(b"NOTADSET");
    assert!(Dataset::read_from(&mut foreign.as_slice()).is_err());
    assert!(Dataset::generate(&DatasetConfig { n_scenarios: 0, ..cfg(1) }).is_err());
}

#[test]
fn perturbation_sets_round_trip() {
    let set = random_perturbation(3, &PerSite([0.8, 0.1, 0.0, 0.1, 0.1]), Norm::Linf, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    set.save(&path).unwrap();
    let back = PerturbationSet::load(&path).unwrap();
    assert_eq!(back, set);
    back.check_budgets().unwrap();
}
