mod common;

use std::fs;

use affectlab::train::{checkpoint_name, prepare_dataset, StopReason, TrainConfig, LOG_FILE};
use affectlab::Trainer64;
use common::*;

fn trainer(cfg: &TrainConfig) -> Trainer64 {
    Trainer64::new(cfg.clone(), prepare_dataset(cfg).unwrap()).unwrap()
}

/// Log lines without the wall-clock column.
fn log_rows(cfg: &TrainConfig) -> Vec<String> {
    fs::read_to_string(cfg.out_dir.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once('\t').unwrap().0.to_string())
        .collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), 6, 40);
    let a = trainer(&cfg).run(|_| {}).unwrap();
    let first = log_rows(&cfg);
    let b = trainer(&cfg).run(|_| {}).unwrap();
    assert_eq!(first, log_rows(&cfg));
    assert_eq!(first.len(), 4);
    assert!(a.reports.iter().zip(&b.reports).all(|(x, y)| x.same_result(y)));
    assert_eq!(a.stop, StopReason::Completed);
    for e in [2, 3] {
        assert!(cfg.out_dir.join(checkpoint_name(e)).is_file());
    }
    assert!(!cfg.out_dir.join(checkpoint_name(1)).exists());

    let mut other = cfg.clone();
    other.seed = 18;
    other.out_dir = dir.path().join("other");
    trainer(&other).run(|_| {}).unwrap();
    assert_ne!(first, log_rows(&other));
}

#[test]
fn resumed_training_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic_config(dir.path(), 6, 40);
    cfg.epochs = Some(4);
    let mut straight = trainer(&cfg);
    let full = straight.run(|_| {}).unwrap();

    let mut first = cfg.clone();
    first.epochs = Some(2);
    first.out_dir = dir.path().join("split");
    trainer(&first).run(|_| {}).unwrap();
    let mut second = cfg.clone();
    second.out_dir = first.out_dir.clone();
    let ck = first.out_dir.join(checkpoint_name(2));
    let mut resumed = Trainer64::resume(second.clone(), prepare_dataset(&second).unwrap(), &ck).unwrap();
    assert_eq!(resumed.epoch, 2);
    let rest = resumed.run(|_| {}).unwrap();

    assert_eq!(rest.reports.len(), 2);
    for (a, b) in full.reports[2..].iter().zip(&rest.reports) {
        assert!(a.same_result(b), "{a:?} vs {b:?}");
    }
    for (p, q) in straight.model.params().iter().zip(resumed.model.params()) {
        assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
    }
    assert_eq!(log_rows(&cfg), log_rows(&second));

    // already at the epoch budget
    let ck4 = second.out_dir.join(checkpoint_name(4));
    let mut done = Trainer64::resume(second.clone(), prepare_dataset(&second).unwrap(), &ck4).unwrap();
    assert_eq!(done.run(|_| {}).unwrap().stop, StopReason::NothingToDo);
}

#[test]
fn corrupt_checkpoint_fails_before_output_is_touched() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic_config(dir.path(), 4, 20);
    cfg.out_dir = dir.path().join("never");
    let bad = dir.path().join("bad.aflb");
    fs::write(&bad, b"AFLB1 but not really").unwrap();
    assert!(Trainer64::resume(cfg.clone(), prepare_dataset(&cfg).unwrap(), &bad).is_err());
    assert!(!cfg.out_dir.exists());
}

#[test]
fn early_stop_and_target() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic_config(dir.path(), 4, 20);
    cfg.epochs = Some(6);
    // nothing trainable, so the test CCC never improves after epoch 1
    cfg.freeze = ["conv", "fc", "gru", "head"].map(String::from).to_vec();
    cfg.patience = 2;
    let out = trainer(&cfg).run(|_| {}).unwrap();
    assert_eq!(out.stop, StopReason::EarlyStop);
    assert_eq!(out.reports.len(), 3);
    assert_eq!(out.final_checkpoint.unwrap(), cfg.out_dir.join(checkpoint_name(3)));

    cfg.target_ccc = Some(-1.0);
    cfg.out_dir = dir.path().join("target");
    let out = trainer(&cfg).run(|_| {}).unwrap();
    assert_eq!((out.stop, out.reports.len()), (StopReason::TargetReached, 1));
}
