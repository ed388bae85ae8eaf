//! End-to-end training behavior on small synthetic datasets.

use std::fs;
use std::path::Path;

use stepnet_core::config::ExperimentConfig;
use stepnet_core::data::{generate_synthetic, write_dataset, Dataset, Mode, Split, SyntheticSpec};
use stepnet_core::model::StepNet;
use stepnet_core::params::ParamStore;
use stepnet_core::train::{evaluate_checkpoint, mean_loss, train, Checkpoint, TrainOptions};

fn write_synthetic(root: &Path, spec: &SyntheticSpec) {
    let (clips, manifest) = generate_synthetic(spec).unwrap();
    write_dataset(root, &clips, &manifest).unwrap();
}

/// Five signers, one held out, five clips per class.
fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        clips_per_class: 5,
        signers: 5,
        test_signers: 1,
        ..SyntheticSpec::default()
    }
}

fn tiny_config(root: &Path, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.data.root = root.to_path_buf();
    cfg.data.synthetic = tiny_spec();
    cfg.schedule.epochs = epochs;
    cfg.schedule.warmup_epochs = 1;
    cfg
}

fn quiet(dir: &Path, deterministic: bool) -> TrainOptions {
    TrainOptions {
        out_dir: dir.to_path_buf(),
        deterministic,
        ..TrainOptions::default()
    }
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic(&data, &tiny_spec());
    let cfg = tiny_config(&data, 3);

    let straight = tmp.path().join("straight");
    train(&cfg, &quiet(&straight, true), |_| {}).unwrap();

    let split = tmp.path().join("split");
    let first = TrainOptions {
        stop_after: Some(1),
        ..quiet(&split, true)
    };
    let partial = train(&cfg, &first, |_| {}).unwrap();
    assert_eq!(partial.log.len(), 1);
    let resumed = TrainOptions {
        resume: Some(split.join("last.json")),
        ..quiet(&split, true)
    };
    let outcome = train(&cfg, &resumed, |_| {}).unwrap();
    assert_eq!(outcome.log.len(), 3);

    for file in ["last.json", "metrics.jsonl"] {
        let a = fs::read(straight.join(file)).unwrap();
        let b = fs::read(split.join(file)).unwrap();
        assert!(a == b, "{file} differs after resume");
    }
}

#[test]
fn resume_rejects_a_different_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic(&data, &tiny_spec());
    let cfg = tiny_config(&data, 1);
    let out = tmp.path().join("run");
    train(&cfg, &quiet(&out, true), |_| {}).unwrap();

    let mut other = cfg.clone();
    other.seed = 1;
    let opts = TrainOptions {
        resume: Some(out.join("last.json")),
        ..quiet(&tmp.path().join("other"), true)
    };
    assert!(train(&other, &opts, |_| {}).is_err());
}

#[test]
fn checkpoint_evaluation_matches_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic(&data, &tiny_spec());
    let cfg = tiny_config(&data, 2);
    let out = tmp.path().join("run");
    let outcome = train(&cfg, &quiet(&out, false), |_| {}).unwrap();
    assert!(outcome.log.iter().all(|e| e.elapsed_s.is_some()));

    let (metrics, export) = evaluate_checkpoint(&outcome.last_checkpoint, None, Split::Test).unwrap();
    assert_eq!(metrics, outcome.log.last().unwrap().metrics);
    assert_eq!(export.records().len(), 8);
    let ck = Checkpoint::load(&outcome.best_checkpoint).unwrap();
    assert_eq!(ck.best_top1, Some(outcome.best_top1));
}

#[test]
fn test_mode_loading_is_pure() {
    let tmp = tempfile::tempdir().unwrap();
    write_synthetic(tmp.path(), &tiny_spec());
    let cfg = tiny_config(tmp.path(), 1);
    let ds = Dataset::open(tmp.path(), cfg.data.frames, cfg.data.augment).unwrap();
    for r in ds.records(Split::Test) {
        let a = ds.load(r, Mode::Test, 0, 0).unwrap();
        let b = ds.load(r, Mode::Test, 99, 7).unwrap();
        assert_eq!(a.data(), b.data());
        let c = ds.load(r, Mode::Train, 0, 0).unwrap();
        let d = ds.load(r, Mode::Train, 0, 0).unwrap();
        assert_eq!(c.data(), d.data());
    }
}

/// Mean train-split loss of the parameters stored in `ck`, or of a fresh
/// initialisation when `ck` is `None`.
fn loss_of(cfg: &ExperimentConfig, ds: &Dataset, ck: Option<&Checkpoint>) -> f64 {
    let mut store = ParamStore::<f32>::seeded(cfg.seed);
    let net = StepNet::new(&mut store, &cfg.model).unwrap();
    if let Some(ck) = ck {
        store.load_records(&ck.params).unwrap();
    }
    mean_loss(&net, &store, ds, Split::Train, Mode::Test, 0, 0).unwrap()
}

#[test]
fn one_epoch_lowers_the_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let base = ExperimentConfig::desk();
    write_synthetic(&data, &base.data.synthetic);
    let ds = Dataset::open(&data, base.data.frames, base.data.augment).unwrap();

    let mut drops = Vec::new();
    for seed in 0..3 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.data.root = data.clone();
        let before = loss_of(&cfg, &ds, None);
        let out = tmp.path().join(format!("run{seed}"));
        let opts = TrainOptions {
            stop_after: Some(1),
            ..quiet(&out, true)
        };
        let outcome = train(&cfg, &opts, |_| {}).unwrap();
        let after = loss_of(&cfg, &ds, Some(&Checkpoint::load(&outcome.last_checkpoint).unwrap()));
        drops.push(before - after);
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "median loss change after one epoch: {:?}", drops);
}
