use std::path::Path;

use depthuq::datagen::{write_dataset, Dataset, SceneSpec};
use depthuq::geometry::warp;
use depthuq::io;
use depthuq::models::ModelCheckpoint;
use depthuq::photometric::{photometric_error, LossConfig};
use depthuq::trainer::{
    bootstrap_subset, mean_photometric_loss, referenced_files, train, ExperimentManifest, LoadedExperiment, Supervision, TrainConfig,
    LOSSES_FILE, METRICS_FILE,
};
use depthuq::uncertainty::StrategyKind;
use depthuq::Error;

fn toy_dataset(dir: &Path, count: u64, size: usize) -> Dataset {
    let spec = SceneSpec {
        width: size,
        height: size,
        ..SceneSpec::default()
    };
    write_dataset(&spec, count, dir).unwrap();
    Dataset::open(dir).unwrap()
}

fn tiny(sup: Supervision, kind: StrategyKind) -> TrainConfig {
    let mut c = TrainConfig::new(sup, kind);
    c.epochs = 1;
    c.lr = 1e-3;
    c.model.encoder_widths = vec![4, 4, 8, 8];
    c.model.pose_widths = vec![4, 4, 8, 8];
    c.strategy.n = 3;
    c.strategy.cycles = 3;
    c
}

fn checkpoint_hashes(m: &ExperimentManifest) -> Vec<String> {
    m.checkpoint_refs.iter().map(|r| r.sha256.clone()).collect()
}

#[test]
fn zero_epochs_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(dir.path(), 4, 16);
    let mut c = tiny(Supervision::S, StrategyKind::Post);
    c.epochs = 0;
    assert!(matches!(train(&c, &ds, &dir.path().join("run")), Err(Error::InvalidArgument(_))));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn one_epoch_writes_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(&dir.path().join("ds"), 16, 32);
    let run = dir.path().join("run");
    let m = train(&tiny(Supervision::S, StrategyKind::Post), &ds, &run).unwrap();
    assert_eq!(m.dataset_hash, ds.hash);
    assert_eq!(m.checkpoint_refs.len(), 1);
    for f in referenced_files(&m, &run) {
        assert!(f.exists(), "{} missing", f.display());
    }
    assert_eq!(ExperimentManifest::load(&run).unwrap(), m);
    let ckpt = ModelCheckpoint::load(&run.join(&m.checkpoint_refs[0].path)).unwrap();
    assert_eq!(io::sha256_hex(&ckpt.to_bytes()), m.checkpoint_refs[0].sha256);
    let metrics = std::fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    assert!(metrics.starts_with("abs_rel,"));
}

#[test]
fn equal_seeds_give_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(&dir.path().join("ds"), 10, 16);
    let c = tiny(Supervision::MS, StrategyKind::Log);
    let a = train(&c, &ds, &dir.path().join("a")).unwrap();
    let b = train(&c, &ds, &dir.path().join("b")).unwrap();
    assert_eq!(checkpoint_hashes(&a), checkpoint_hashes(&b));
    for f in [LOSSES_FILE, METRICS_FILE] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
    let mut other = c.clone();
    other.seed = 1;
    let o = train(&other, &ds, &dir.path().join("o")).unwrap();
    assert_ne!(checkpoint_hashes(&a), checkpoint_hashes(&o));
}

#[test]
fn snapshot_run_emits_one_checkpoint_per_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(&dir.path().join("ds"), 16, 16);
    let mut c = tiny(Supervision::S, StrategyKind::Snap);
    c.strategy.n = 2;
    let run = dir.path().join("run");
    let m = train(&c, &ds, &run).unwrap();
    // 13 training images, batch 4: 4 steps rounded up to 6 for 3 cycles
    let steps: Vec<u64> = m.checkpoint_refs.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![2, 4, 6]);
    assert!(m.checkpoint_refs.iter().all(|r| r.role == "snapshot"));
    let loaded = LoadedExperiment::open(&run).unwrap();
    assert_eq!(loaded.models.len(), 2);
    assert_eq!(loaded.models[1].training_step, 6);
}

#[test]
fn every_strategy_reports_its_forward_count() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(&dir.path().join("ds"), 6, 16);
    let image = ds.load(&ds.manifest.test[0]).unwrap().left;
    for kind in StrategyKind::ALL {
        let c = tiny(Supervision::S, kind);
        let run = dir.path().join(kind.name().replace('+', "_"));
        train(&c, &ds, &run).unwrap();
        let out = LoadedExperiment::open(&run).unwrap().infer(&image).unwrap();
        let expect = match kind {
            StrategyKind::Post => 2,
            StrategyKind::Repr | StrategyKind::Log | StrategyKind::SelfTeaching => 1,
            _ => c.strategy.n,
        };
        assert_eq!(out.forwards, expect, "{kind}");
        assert_eq!(out.uncertainty.values().len(), 16 * 16);
        if kind.is_self_teaching() {
            let index: serde_json::Value = io::read_json(&run.join("proxy/index.json")).unwrap();
            assert_eq!(index["entries"].as_array().unwrap().len(), ds.manifest.train.len());
            assert!(run.join("teacher/experiment.json").exists());
        }
    }
}

#[test]
fn corrupt_checkpoint_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(&dir.path().join("ds"), 4, 16);
    let run = dir.path().join("run");
    let m = train(&tiny(Supervision::S, StrategyKind::Log), &ds, &run).unwrap();
    let bin = run.join(format!("{}.bin", m.checkpoint_refs[0].path));
    let mut bytes = std::fs::read(&bin).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x55;
    std::fs::write(&bin, bytes).unwrap();
    assert!(LoadedExperiment::open(&run).is_err());
}

#[test]
fn bootstrap_subsets_are_reproducible() {
    let a = bootstrap_subset(7, 2, 40, 0.25);
    assert_eq!(a, bootstrap_subset(7, 2, 40, 0.25));
    assert_eq!(a.len(), 10);
    assert!(a.windows(2).all(|w| w[0] < w[1]) && a.iter().all(|&i| i < 40));
    assert_ne!(a, bootstrap_subset(7, 3, 40, 0.25));
    assert_ne!(a, bootstrap_subset(8, 2, 40, 0.25));
    assert_eq!(bootstrap_subset(0, 0, 13, 0.25).len(), 4);
}

#[test]
fn training_lowers_the_loss_and_oracle_depth_sits_below_it() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(&dir.path().join("ds"), 80, 32);
    let mut c = tiny(Supervision::S, StrategyKind::Post);
    c.batch_size = 1;
    let run = dir.path().join("run");
    let m = train(&c, &ds, &run).unwrap();

    let text = std::fs::read_to_string(run.join(LOSSES_FILE)).unwrap();
    let losses: Vec<f64> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 64);
    assert!(losses.iter().all(|l| l.is_finite()));
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(avg(&losses[48..]) < avg(&losses[..16]), "{losses:?}");

    let samples = ds.load_split(false).unwrap();
    let cfg = LossConfig::default();
    let trained = ModelCheckpoint::load(&run.join(&m.checkpoint_refs[0].path)).unwrap();
    let trained_loss = mean_photometric_loss(&trained, &samples, Supervision::S, &cfg).unwrap();
    let mut oracle = 0.0;
    for s in &samples {
        let k = s.left.intrinsics;
        let (warped, valid) = warp(&s.right, &s.depth, &s.poses.right, &k, &k).unwrap();
        let err = photometric_error(&warped, &s.left, &cfg).unwrap();
        let kept: Vec<f64> = err.iter().zip(&valid).filter(|(_, &v)| v).map(|(e, _)| *e).collect();
        oracle += kept.iter().sum::<f64>() / kept.len() as f64;
    }
    oracle /= samples.len() as f64;
    assert!(oracle < 0.03, "oracle floor {oracle}");
    assert!(oracle < trained_loss, "oracle {oracle} vs trained {trained_loss}");
}
