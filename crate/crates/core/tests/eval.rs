use ma2t::attacks::{AttackConfig, AttackMethod, Norm};
use ma2t::eval::{
    apply_corruption, emit_report, evaluate_blackbox, evaluate_corruption, evaluate_whitebox, git_blob_hash,
    validate_bundle, CorruptionKind, CorruptionSpec, InputHash, ReportBundle, Surrogate, SEVERITIES,
};
use ma2t::task::dataset::{Dataset, DatasetConfig};
use ma2t::task::metrics::sample_metrics;
use ma2t::task::model::build_reference_model;
use ma2t::trainer::{Checkpoint, TrainMethod};

fn val(n: usize) -> Dataset {
    Dataset::generate(&DatasetConfig { n_scenarios: 3 * n, seed: 31, train_fraction: 0.5, ..DatasetConfig::default() })
        .unwrap()
        .val
        .head(n)
}

fn ckpt(seed: u64) -> Checkpoint {
    Checkpoint { pipeline: build_reference_model(seed), method: TrainMethod::Clean, seed, epoch: 0, dwaa: None }
}

fn pgd_image() -> AttackConfig {
    AttackConfig::images_only(AttackMethod::Pgd, Norm::Linf, 0.2).with_restarts(2)
}

#[test]
fn clean_row_matches_a_direct_forward_pass() {
    let data = val(70);
    let c = ckpt(1);
    let m = evaluate_whitebox(&c, &data, &[pgd_image()], &[0]).unwrap();
    let mut l2 = Vec::new();
    for b in data.batches(data.len()).unwrap() {
        let heads = c.pipeline.forward(&b).unwrap().heads;
        l2.extend(sample_metrics(&heads, &b.labels).iter().map(|s| s.avg_l2));
    }
    let mean = l2.iter().sum::<f64>() / l2.len() as f64;
    assert_eq!(m.clean.metrics.avg_l2.count, 70);
    assert!((m.clean.metrics.avg_l2.mean - mean).abs() < 1e-12);
    assert_eq!(m.rows.len(), 1);
    assert_eq!(m.rows[0].metrics.avg_l2.count, 70);
}

#[test]
fn seeds_pool_samples() {
    let data = val(10);
    let m = evaluate_whitebox(&ckpt(1), &data, &[pgd_image()], &[0, 1, 2]).unwrap();
    assert_eq!(m.rows[0].metrics.avg_l2.count, 30);
    assert_eq!(m.clean.metrics.avg_l2.count, 10);
    assert!(evaluate_whitebox(&ckpt(1), &data, &[pgd_image()], &[]).is_err());
}

#[test]
fn self_transfer_equals_whitebox_image_row() {
    let data = val(20);
    let c = ckpt(2);
    let attacks = [pgd_image()];
    let wb = evaluate_whitebox(&c, &data, &attacks, &[4]).unwrap();
    let bb = evaluate_blackbox(&c, &[Surrogate { name: "self", checkpoint: &c }], &data, &attacks, &[4]).unwrap();
    assert_eq!(bb.rows[0].metrics, wb.rows[0].metrics);
    assert_eq!(bb.clean, wb.clean);
}

#[test]
fn blackbox_reports_the_strongest_candidate_per_surrogate() {
    let data = val(20);
    let victim = ckpt(2);
    let (s1, s2) = (ckpt(5), ckpt(6));
    let mut fgsm = AttackConfig::images_only(AttackMethod::Fgsm, Norm::Linf, 0.2);
    fgsm.restarts = 1;
    let attacks = [fgsm, pgd_image()];
    let m = evaluate_blackbox(
        &victim,
        &[Surrogate { name: "a", checkpoint: &s1 }, Surrogate { name: "b", checkpoint: &s2 }],
        &data,
        &attacks,
        &[0],
    )
    .unwrap();
    assert_eq!(m.rows.len(), 2);
    for row in &m.rows {
        assert_eq!(row.candidates.len(), 2);
        let best = row.candidates.iter().map(|c| c.avg_l2_degradation).fold(f64::MIN, f64::max);
        assert!((m.degradation(row) - best).abs() < 1e-12);
    }
    let feature = AttackConfig::module_wise_default();
    assert!(evaluate_blackbox(&victim, &[Surrogate { name: "a", checkpoint: &s1 }], &data, &[feature], &[0]).is_err());
}

#[test]
fn corruption_grid_has_thirty_rows_in_range() {
    let data = val(12);
    let m = evaluate_corruption(&ckpt(3), &data, &[0]).unwrap();
    assert_eq!(m.rows.len(), 30);
    let labels: std::collections::HashSet<_> = m.rows.iter().map(|r| r.label.clone()).collect();
    assert_eq!(labels.len(), 30);
    for b in data.batches(12).unwrap() {
        for kind in CorruptionKind::ALL {
            for s in SEVERITIES {
                let out = apply_corruption(&b.obs, &CorruptionSpec::new(kind, s, 9).unwrap()).unwrap();
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(out.shape(), b.obs.shape());
            }
        }
    }
    assert!(CorruptionSpec::new(CorruptionKind::Snow, 0, 0).is_err());
    assert!(CorruptionSpec::new(CorruptionKind::Snow, 6, 0).is_err());
}

#[test]
fn corruption_strength_grows_with_severity() {
    let data = val(40);
    let obs = &data.batches(40).unwrap()[0].obs;
    for kind in CorruptionKind::ALL {
        let mut prev = 0.0;
        for s in SEVERITIES {
            let out = apply_corruption(obs, &CorruptionSpec::new(kind, s, 2).unwrap()).unwrap();
            let change = out.sub(obs).unwrap().data().iter().map(|v| v.abs()).sum::<f64>();
            assert!(change > 0.0 && change >= prev, "{kind:?} severity {s}: {change} < {prev}");
            prev = change;
        }
    }
}

#[test]
fn corruption_is_deterministic_per_spec() {
    let obs = &val(5).batches(5).unwrap()[0].obs;
    let spec = CorruptionSpec::new(CorruptionKind::ShotNoise, 3, 1).unwrap();
    assert_eq!(apply_corruption(obs, &spec).unwrap(), apply_corruption(obs, &spec).unwrap());
    let other = CorruptionSpec { seed: 2, ..spec };
    assert_ne!(apply_corruption(obs, &spec).unwrap(), apply_corruption(obs, &other).unwrap());
}

#[test]
fn report_bundles_are_byte_identical_and_validate() {
    let data = val(10);
    let build = || {
        let m = evaluate_whitebox(&ckpt(1), &data, &[pgd_image()], &[0]).unwrap();
        ReportBundle::new(vec![m], serde_json::json!({"k": 1}), vec![0], vec![InputHash::of_bytes("x", b"abc")])
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let w1 = emit_report(d1.path(), &build()).unwrap();
    let w2 = emit_report(d2.path(), &build()).unwrap();
    assert_eq!(w1.len(), 2);
    for (a, b) in w1.iter().zip(&w2) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    let text = std::fs::read_to_string(d1.path().join("report.json")).unwrap();
    assert_eq!(validate_bundle(&text).unwrap(), build());
    let csv = std::fs::read_to_string(d1.path().join("whitebox.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("Clean,"));

    let mut dup = build();
    dup.matrices.push(dup.matrices[0].clone());
    assert!(validate_bundle(&serde_json::to_string(&dup).unwrap()).is_err());
}

#[test]
fn blob_hash_matches_git() {
    // `git hash-object --object-format=sha256` of a file holding "hello\n".
    assert_eq!(git_blob_hash(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
}
