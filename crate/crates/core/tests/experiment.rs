use std::fs;
use std::path::{Path, PathBuf};

use sff_core::data::{load_idx, write_idx_images, write_idx_labels};
use sff_core::model::{Preset, TrainMode};
use sff_core::optim::{Direction, EarlyStop, PlateauScheduler, StopDecision};
use sff_core::trainer::{finetune, read_checkpoint, run_experiment, TrainConfig, METRICS_HEADER};
use sff_core::Rng;

fn shipped_mnist() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

#[test]
fn shipped_mnist_headers() {
    let dir = shipped_mnist();
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!(train.images.shape(), &[8004, 1, 28, 28]);
    assert_eq!(test.images.shape(), &[1996, 1, 28, 28]);
    assert_eq!(train.classes, 10);
    assert!(train.class_counts().iter().all(|&c| c > 500));
    assert!(train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

/// Four-class IDX fixture: a bar whose orientation and side encode the
/// label, plus noise.
fn fixture(dir: &Path, n_train: usize, n_test: usize) {
    let side = 12;
    let make = |n: usize, seed: u64| {
        let mut rng = Rng::new(seed);
        let mut px = Vec::with_capacity(n * side * side);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 4) as u8;
            for r in 0..side {
                for c in 0..side {
                    let on = match label {
                        0 => r == 3,
                        1 => r == 8,
                        2 => c == 3,
                        _ => c == 8,
                    };
                    let v = if on { 200.0 } else { 20.0 } + 25.0 * rng.normal();
                    px.push(v.clamp(0.0, 255.0) as u8);
                }
            }
            labels.push(label);
        }
        (px, labels)
    };
    let (px, lb) = make(n_train, 0);
    write_idx_images(&dir.join("train-images-idx3-ubyte"), n_train, side, side, &px).unwrap();
    write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &lb).unwrap();
    let (px, lb) = make(n_test, 1);
    write_idx_images(&dir.join("t10k-images-idx3-ubyte"), n_test, side, side, &px).unwrap();
    write_idx_labels(&dir.join("t10k-labels-idx1-ubyte"), &lb).unwrap();
}

fn config(data: &Path, out: &Path, mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        preset: Preset::Cnnb,
        widths: Some(vec![4, 8, 8]),
        data_dir: data.to_path_buf(),
        out_dir: out.to_path_buf(),
        epochs: 4,
        batch_size: 16,
        lr: 3e-3,
        deterministic: true,
        ..TrainConfig::default()
    }
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path(), 90, 20);
    for mode in [TrainMode::Sff, TrainMode::Cwc, TrainMode::Bp] {
        let a = tmp.path().join(format!("a-{mode}"));
        let b = tmp.path().join(format!("b-{mode}"));
        let cfg = config(tmp.path(), &a, mode);
        run_experiment(&cfg).unwrap();
        run_experiment(&TrainConfig { out_dir: b.clone(), ..cfg }).unwrap();
        for f in ["seed-0/metrics.csv", "seed-0/model.ckpt"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{mode} {f}");
        }
    }
}

#[test]
fn accounting_changes_only_the_peak_column() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path(), 60, 12);
    let cfg = config(tmp.path(), &tmp.path().join("off"), TrainMode::Sff);
    let (_, off) = run_experiment(&cfg).unwrap();
    let (_, on) = run_experiment(&TrainConfig {
        out_dir: tmp.path().join("on"),
        account_memory: true,
        ..cfg
    })
    .unwrap();
    assert_eq!(off[0].rows.len(), on[0].rows.len());
    for (a, b) in off[0].rows.iter().zip(&on[0].rows) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.acc_ensemble, b.acc_ensemble);
        assert_eq!(a.peak_bytes, 0);
        assert!(b.peak_bytes > 0);
    }
    assert_eq!(
        fs::read(off[0].checkpoint.clone()).unwrap(),
        fs::read(on[0].checkpoint.clone()).unwrap()
    );
}

/// Replay the plateau and early-stop rules from the written CSV and check
/// them against the logged rates and the run length.
#[test]
fn metrics_log_reconstructs_schedulers() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path(), 60, 12);
    let cfg = TrainConfig {
        epochs: 20,
        plateau_patience: 2,
        early_stop_patience: 4,
        lr: 5e-1,
        ..config(tmp.path(), &tmp.path().join("run"), TrainMode::Sff)
    };
    let (summary, runs) = run_experiment(&cfg).unwrap();
    let csv = fs::read_to_string(runs[0].dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let val: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(String::from).collect::<Vec<_>>())
        .filter(|f| f[2] == "val")
        .collect();
    let blocks = 3;
    let epochs = val.len() / blocks;
    assert_eq!(epochs, summary.seeds[0].epochs_run);

    let mut scheds: Vec<PlateauScheduler> = (0..blocks).map(|_| PlateauScheduler::with(Direction::Min, 2, 0.1)).collect();
    let mut lrs = vec![cfg.lr; blocks];
    let mut early = EarlyStop::new(4);
    let mut stopped_at = None;
    for e in 0..epochs {
        let rows = &val[e * blocks..(e + 1) * blocks];
        for (b, row) in rows.iter().enumerate() {
            assert_eq!(row[0].parse::<usize>().unwrap(), e + 1);
            let logged: f64 = row[4].parse().unwrap();
            assert!((logged - lrs[b]).abs() <= 1e-15 * lrs[b], "epoch {} block {b}", e + 1);
            lrs[b] = scheds[b].update(row[3].parse().unwrap(), lrs[b]);
        }
        let acc: f64 = rows[0][5].parse().unwrap();
        if early.update(acc) == StopDecision::Stop && stopped_at.is_none() {
            stopped_at = Some(e + 1);
        }
    }
    assert!(lrs.iter().any(|&l| l < cfg.lr), "no plateau reduction exercised");
    assert_eq!(stopped_at.is_some(), summary.seeds[0].stopped_early);
    if let Some(e) = stopped_at {
        assert_eq!(e, epochs);
    }
}

#[test]
fn multi_seed_summary_and_transfer() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path(), 80, 20);
    let bp_dir = tmp.path().join("bp");
    let ckpt = tmp.path().join("bp.ckpt");
    let (summary, _) = run_experiment(&TrainConfig {
        seeds: vec![0, 1, 2],
        checkpoint_out: Some(ckpt.clone()),
        ..config(tmp.path(), &bp_dir, TrainMode::Bp)
    })
    .unwrap();
    assert_eq!(summary.seeds.len(), 3);
    let accs: Vec<f64> = summary.seeds.iter().map(|s| s.test_accuracy).collect();
    let mean = accs.iter().sum::<f64>() / 3.0;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((summary.aggregate.test_accuracy.mean - mean).abs() < 1e-12);
    assert!((summary.aggregate.test_accuracy.std - std).abs() < 1e-12);
    let on_disk: serde_json::Value = serde_json::from_str(&fs::read_to_string(bp_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(on_disk["config"]["mode"], "bp");
    assert_eq!(on_disk["seeds"].as_array().unwrap().len(), 3);

    let seeded = PathBuf::from(format!("{}.seed1", ckpt.display()));
    read_checkpoint(&seeded).unwrap();
    let ft = TrainConfig {
        epochs: 1,
        ..config(tmp.path(), &tmp.path().join("ft"), TrainMode::Sff)
    };
    let (s, runs) = finetune(&ft, &seeded).unwrap();
    assert_eq!(s.seeds[0].epochs_run, 1);
    assert!(runs[0].rows.iter().all(|r| r.loss.is_finite()));

    let wrong = TrainConfig {
        preset: Preset::TinyResnet,
        ..ft
    };
    assert!(finetune(&wrong, &seeded).is_err());
}

#[test]
fn missing_dataset_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(&tmp.path().join("nowhere"), &tmp.path().join("out"), TrainMode::Sff);
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, sff_core::Error::Io { .. }), "{err}");
}
