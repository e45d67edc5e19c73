use std::fs;
use std::path::Path;

use ffpdet::checkpoint::{self, load_detector};
use ffpdet::config::GlobalConfig;
use ffpdet::dataset::{batch_tensor, generate_dataset, targets_of, Dataset};
use ffpdet::eval::{evaluate, EvalOptions};
use ffpdet::synth::{generate_sample, SceneSpec, Split};
use ffpdet::train::{overfit_smoke, train, TrainConfig, CHECKPOINT_FILE, LOSS_HEADER};
use ffpdet::CliError;
use ffpdet_core::detector::{Detector, DetectorConfig};
use ffpdet_core::gradcheck::tiny_config;
use ffpdet_core::optim::{AdamWConfig, OptimizerState};
use ffpdet_core::{Error, Precision, Tensor};

fn small_config(root: &Path, iterations: u64) -> GlobalConfig {
    let mut cfg = GlobalConfig {
        detector: tiny_config(),
        scene: SceneSpec::bogie_key_like().with_size(96, 64),
        ..GlobalConfig::default()
    };
    cfg.train = TrainConfig {
        batch_size: 2,
        iterations,
        learning_rate: 1e-3,
        checkpoint_every: 3,
        deterministic: true,
        precision: Precision::F64,
        ..TrainConfig::default()
    };
    if !root.join("data").exists() {
        generate_dataset(&cfg.scene, &root.join("data"), 12, 6).unwrap();
    }
    cfg
}

fn rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn resume_continues_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root, 6);

    let full = train(&cfg, root, &root.join("full"), None, &mut |_, _| {}).unwrap();

    // keep the cadence checkpoint written after 3 iterations
    let out = root.join("part");
    let saved = root.join("at3.bin");
    train(&cfg, root, &out, None, &mut |it, _| {
        if it == 3 {
            fs::copy(out.join(CHECKPOINT_FILE), &saved).unwrap();
        }
    })
    .unwrap();
    let resumed = train(&cfg, root, &root.join("resumed"), Some(&saved), &mut |_, _| {}).unwrap();

    let a = rows(&full.loss_curve);
    let b = rows(&resumed.loss_curve);
    assert_eq!(a[0], LOSS_HEADER);
    assert_eq!(b[0], LOSS_HEADER);
    assert_eq!(&a[4..], &b[1..], "rows after the interruption");
    assert_eq!(fs::read(&full.checkpoint).unwrap(), fs::read(&resumed.checkpoint).unwrap());
}

#[test]
fn resume_into_same_directory_drops_later_rows() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root, 6);
    let out = root.join("run");
    let saved = root.join("at3.bin");
    let full = train(&cfg, root, &out, None, &mut |it, _| {
        if it == 3 {
            fs::copy(out.join(CHECKPOINT_FILE), &saved).unwrap();
        }
    })
    .unwrap();
    let before = rows(&full.loss_curve);
    train(&cfg, root, &out, Some(&saved), &mut |_, _| {}).unwrap();
    assert_eq!(rows(&full.loss_curve), before);
}

#[test]
fn resume_with_other_widths_reports_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root, 1);
    let run = train(&cfg, root, &root.join("run"), None, &mut |_, _| {}).unwrap();
    let mut other = cfg.clone();
    other.detector.ffp.channels = 32;
    other.detector.ffp.dfb_width = 32;
    let err = train(&other, root, &root.join("other"), Some(&run.checkpoint), &mut |_, _| {}).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("ffp."), "{msg}");
    assert!(msg.contains("manifest mismatch"), "{msg}");
    assert!(matches!(err, CliError::Core(Error::Config(_))), "{err:?}");
}

#[test]
fn zero_iterations_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root, 0);
    let run = train(&cfg, root, &root.join("run"), None, &mut |_, _| {}).unwrap();
    assert_eq!(run.iterations, 0);
    assert_eq!(rows(&run.loss_curve), vec![LOSS_HEADER.to_string()]);
    let ckpt = checkpoint::load::<f64>(&run.checkpoint).unwrap();
    let fresh: Detector<f64> = Detector::build(cfg.detector.clone(), cfg.train.seed).unwrap();
    assert_eq!(ckpt.store, fresh.store);
    assert_eq!(ckpt.training.unwrap().iteration, 0);
}

#[test]
fn repeated_runs_match_and_losses_stay_finite() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = small_config(root, 4);
    let a = train(&cfg, root, &root.join("a"), None, &mut |_, _| {}).unwrap();
    let b = train(&cfg, root, &root.join("b"), None, &mut |_, _| {}).unwrap();
    assert_eq!(rows(&a.loss_curve), rows(&b.loss_curve));
    for seed in [1, 2, 3] {
        cfg.train.seed = seed;
        cfg.train.precision = Precision::F32;
        let mut seen = 0;
        train(&cfg, root, &root.join(format!("s{seed}")), None, &mut |_, l| {
            assert!(l.is_finite(), "{l:?}");
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, 4);
    }
}

#[test]
fn learning_rate_column_follows_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root, 8);
    let run = train(&cfg, root, &root.join("run"), None, &mut |_, _| {}).unwrap();
    for row in rows(&run.loss_curve).iter().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        let it: u64 = cols[0].parse().unwrap();
        let lr: f64 = cols[5].parse().unwrap();
        assert_eq!(lr, if it < 6 { 1e-3 } else { 1e-4 }, "iteration {it}");
    }
}

#[test]
fn evaluation_does_not_touch_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = small_config(root, 1);
    cfg.train.precision = Precision::F32;
    let run = train(&cfg, root, &root.join("run"), None, &mut |_, _| {}).unwrap();
    let before = fs::read(&run.checkpoint).unwrap();
    let (_, det) = load_detector::<f32>(&run.checkpoint).unwrap();
    let test = Dataset::load(&root.join("data"), Split::Test).unwrap();
    let a = evaluate(&det, &test, &EvalOptions::default()).unwrap();
    let b = evaluate(&det, &test, &EvalOptions::default()).unwrap();
    assert_eq!(a.machine(), b.machine());
    assert_eq!(fs::read(&run.checkpoint).unwrap(), before);
    assert_eq!(a.metrics.m + a.metrics.n, 6);
}

fn smoke_batch() -> (Tensor<f32>, Vec<ffpdet_core::head::ImageTargets>) {
    let spec = SceneSpec::bogie_key_like().with_size(64, 64);
    let samples: Vec<_> = (0..)
        .map(|i| generate_sample(&spec, Split::Train, i))
        .filter(|s| s.is_fault())
        .take(2)
        .collect();
    let refs: Vec<_> = samples.iter().collect();
    (batch_tensor(&refs).unwrap(), samples.iter().map(targets_of).collect())
}

#[test]
fn healthy_model_overfits_one_batch() {
    let (images, targets) = smoke_batch();
    let mut det: Detector<f32> = Detector::build(DetectorConfig::default(), 0).unwrap();
    let report = overfit_smoke(&mut det, 1e-3, &images, &targets).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn zero_learning_rate_or_frozen_weights_fail_smoke() {
    let (images, targets) = smoke_batch();
    let mut det: Detector<f32> = Detector::build(tiny_config(), 0).unwrap();
    let report = overfit_smoke(&mut det, 0.0, &images, &targets).unwrap();
    assert!(!report.passed);
    assert!((report.first - report.final_loss).abs() < 1e-3 * report.first, "{report:?}");

    let mut det: Detector<f32> = Detector::build(tiny_config(), 0).unwrap();
    det.store.set_trainable("", false);
    assert!(!overfit_smoke(&mut det, 1e-3, &images, &targets).unwrap().passed);
}

#[test]
fn non_finite_loss_aborts_with_iteration() {
    let (images, targets) = smoke_batch();
    let mut det: Detector<f32> = Detector::build(tiny_config(), 0).unwrap();
    let bias = det.store.find("head.cls_out.bias").unwrap();
    det.store.get_mut(bias).data_mut()[0] = f32::NAN;
    let before = det.store.clone();
    let mut opt = OptimizerState::new(&det.store, 1e-3, AdamWConfig::default());
    let err = det.train_step(&mut opt, images, &targets, 17).unwrap_err();
    match err {
        Error::NonFinite { iteration, detail } => {
            assert_eq!(iteration, 17);
            assert!(detail.contains("cls"), "{detail}");
        }
        other => panic!("unexpected {other:?}"),
    }
    // NaN != NaN, so compare bit patterns
    let bits = |s: &ffpdet_core::params::ParamStore<f32>| -> Vec<u32> {
        s.iter().flat_map(|(_, p)| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    };
    assert_eq!(bits(&det.store), bits(&before));
}
