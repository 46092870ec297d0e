use ma2t::pipeline::{ModuleId, PerSite};
use ma2t::task::dataset::{Dataset, DatasetConfig};
use ma2t::trainer::{
    evaluate_loss, finetune, finetune_baseline, finetune_ma2t, pretrain_clean, train_with_recovery, write_run,
    Checkpoint, TrainConfig, TrainMethod, TrainRun,
};

fn data() -> Dataset {
    Dataset::generate(&DatasetConfig { n_scenarios: 60, seed: 21, ..DatasetConfig::default() }).unwrap().train
}

fn small(mut cfg: TrainConfig) -> TrainConfig {
    cfg.epochs = 1;
    cfg.batch_size = 16;
    cfg
}

fn pretrained(train: &Dataset) -> Checkpoint {
    pretrain_clean(train, &small(TrainConfig::pretrain(3))).unwrap().checkpoint
}

fn bytes(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    c.write_to(&mut out).unwrap();
    out
}

fn loss_bits(run: &TrainRun) -> Vec<[u64; 5]> {
    run.batches.iter().map(|b| b.losses.0.map(f64::to_bits)).collect()
}

#[test]
fn zero_budget_ma2t_is_clean_finetuning() {
    let train = data();
    let start = pretrained(&train);
    let mut ma2t = small(TrainConfig::finetune(TrainMethod::Ma2t, 8));
    ma2t.attack.budgets = PerSite([0.0; 5]);
    ma2t.dwaa.enabled = false;
    let clean = small(TrainConfig::finetune(TrainMethod::Clean, 8));
    let a = finetune_ma2t(&start, &train, &ma2t).unwrap();
    let b = finetune(&start, &train, &clean).unwrap();
    assert_eq!(loss_bits(&a), loss_bits(&b));
    assert_eq!(a.checkpoint.pipeline, b.checkpoint.pipeline);
}

#[test]
fn frozen_modules_do_not_move() {
    let train = data();
    let start = pretrained(&train);
    let mut cfg = small(TrainConfig::finetune(TrainMethod::Ma2t, 4));
    cfg.frozen = vec![ModuleId::Track, ModuleId::Occ];
    let run = finetune_ma2t(&start, &train, &cfg).unwrap();
    for id in ModuleId::ALL {
        let before = &start.pipeline.module(id).params;
        let after = &run.checkpoint.pipeline.module(id).params;
        let same = before.iter().zip(after).all(|(x, y)| x.value.bits() == y.value.bits());
        assert_eq!(same, cfg.frozen.contains(&id), "{id}");
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let train = data();
    let start = pretrained(&train);
    let cfg = small(TrainConfig::finetune(TrainMethod::Ma2t, 5));
    let a = finetune_ma2t(&start, &train, &cfg).unwrap();
    let b = finetune_ma2t(&start, &train, &cfg).unwrap();
    assert_eq!(bytes(&a.checkpoint), bytes(&b.checkpoint));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    a.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, a.checkpoint);
    assert_eq!(std::fs::read(&path).unwrap(), bytes(&loaded));
    assert_eq!(loaded.epoch, start.epoch + 1);
    assert!(loaded.dwaa.is_some());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let c = pretrained(&data());
    let good = bytes(&c);
    let mut bad_magic = good.clone();
    bad_magic[0] ^= 1;
    assert!(Checkpoint::read_from(&mut bad_magic.as_slice()).is_err());
    assert!(Checkpoint::read_from(&mut &good[..good.len() - 3]).is_err());
}

#[test]
fn different_seeds_give_different_models() {
    let train = data();
    let a = pretrain_clean(&train, &small(TrainConfig::pretrain(1))).unwrap();
    let b = pretrain_clean(&train, &small(TrainConfig::pretrain(2))).unwrap();
    assert_ne!(a.checkpoint.pipeline.checksum(), b.checkpoint.pipeline.checksum());
}

#[test]
fn pretraining_reduces_the_loss() {
    let train = data();
    let mut cfg = small(TrainConfig::pretrain(6));
    cfg.epochs = 4;
    let run = pretrain_clean(&train, &cfg).unwrap();
    let init = ma2t::task::build_reference_model(6);
    let before = evaluate_loss(&init, &train, 32).unwrap().total;
    let after = evaluate_loss(&run.checkpoint.pipeline, &train, 32).unwrap().total;
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn baselines_train_and_methods_are_checked() {
    let train = data();
    let start = pretrained(&train);
    let cfg = small(TrainConfig::finetune(TrainMethod::PgdLinf, 2));
    let run = finetune_baseline(&start, &train, &cfg).unwrap();
    assert_eq!(run.checkpoint.method, TrainMethod::PgdLinf);
    assert!(run.checkpoint.dwaa.is_none());
    assert!(finetune_baseline(&start, &train, &small(TrainConfig::finetune(TrainMethod::Ma2t, 2))).is_err());
    assert!(finetune_ma2t(&start, &train, &cfg).is_err());
    assert!(pretrain_clean(&train, &cfg).is_err());
    assert!(pretrain_clean(&train.head(0), &small(TrainConfig::pretrain(1))).is_err());
}

#[test]
fn dwaa_updates_once_two_windows_have_passed() {
    let train = data();
    let start = pretrained(&train);
    let mut cfg = small(TrainConfig::finetune(TrainMethod::Ma2t, 7));
    cfg.epochs = 3;
    cfg.dwaa.update_period = 2;
    let run = finetune_ma2t(&start, &train, &cfg).unwrap();
    // 3 batches per epoch, 9 batches, windows close after batches 2, 4, 6, 8.
    assert_eq!(run.batches.len(), 9);
    assert_eq!(run.trajectory.len(), 4);
    for (_, w) in &run.trajectory {
        assert!((w.sum() - 5.0).abs() < 1e-9);
    }
    assert_eq!(run.checkpoint.dwaa.as_ref().unwrap().t, 3);
}

#[test]
fn run_files_are_written() {
    let train = data();
    let cfg = small(TrainConfig::pretrain(1));
    let run = pretrain_clean(&train, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(&run, &cfg, dir.path()).unwrap();
    let batches = std::fs::read_to_string(dir.path().join("batches.csv")).unwrap();
    assert_eq!(batches.lines().count(), 1 + run.batches.len());
    let config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 1);
    assert_eq!(Checkpoint::load(&dir.path().join("final.ckpt")).unwrap(), run.checkpoint);
    assert!(dir.path().join("dwaa.csv").is_file());
}

#[test]
fn recovery_wrapper_matches_plain_training() {
    let train = data();
    let cfg = small(TrainConfig::pretrain(9));
    let dir = tempfile::tempdir().unwrap();
    let a = train_with_recovery(None, &train, &cfg, dir.path()).unwrap();
    let b = pretrain_clean(&train, &cfg).unwrap();
    assert_eq!(bytes(&a.checkpoint), bytes(&b.checkpoint));
    assert!(!dir.path().join("last_good.ckpt").exists());
}
