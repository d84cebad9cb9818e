use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{load_into, read_checkpoint, save_checkpoint};
use super::metrics::{aggregate, write_metrics, write_summary, MetricsRow, SeedSummary, Summary};
use super::{evaluate, needs_pairs, train_minibatch, DatasetFormat, StepOptions, TrainConfig, TrainState};
use crate::data::{load_cifar_binary, load_idx, split, subsample, Dataset, Normalizer, SplitSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::layers::Ctx;
use crate::memory::MemoryAccountant;
use crate::model::{peak_activation_estimate, BlockGraph, GraphSpec, TrainMode};
use crate::optim::StopDecision;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Training pool and test set described by `cfg`.
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let dir = &cfg.data_dir;
    match cfg.dataset_format {
        DatasetFormat::Idx => Ok((
            load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?,
            load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?,
        )),
        DatasetFormat::Cifar => {
            let base = if dir.join("cifar-10-batches-bin").is_dir() {
                dir.join("cifar-10-batches-bin")
            } else {
                dir.clone()
            };
            let train: Vec<PathBuf> = (1..=5).map(|i| base.join(format!("data_batch_{i}.bin"))).collect();
            let train_refs: Vec<&Path> = train.iter().map(PathBuf::as_path).collect();
            Ok((
                load_cifar_binary(&train_refs)?,
                load_cifar_binary(&[&base.join("test_batch.bin")])?,
            ))
        }
    }
}

/// Result of training one seed.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: SeedSummary,
    pub rows: Vec<MetricsRow>,
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
}

fn exec_for(cfg: &TrainConfig) -> Exec {
    if cfg.deterministic {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn graph_spec(cfg: &TrainConfig, train: &Dataset) -> Result<GraphSpec> {
    let widths = cfg.widths.clone().unwrap_or_else(|| cfg.preset.default_widths());
    Ok(GraphSpec::with_widths(cfg.preset, cfg.mode, train.classes, train.sample_shape(), widths)?.head_kernel(cfg.head_kernel))
}

/// Train and evaluate one seed; writes `metrics.csv` and `model.ckpt` under
/// `out_dir/seed-<seed>`.
pub fn run_seed(cfg: &TrainConfig, pool: &Dataset, test: &Dataset, seed: u64) -> Result<RunOutcome> {
    let wall = Instant::now();
    let exec = exec_for(cfg);
    let pool = match cfg.subsample {
        Some(n) if n < pool.len() => subsample(pool, n, seed)?,
        _ => pool.clone(),
    };
    let (mut train, mut val) = split(
        &pool,
        SplitSpec {
            seed,
            val_fraction: cfg.val_fraction,
        },
    )?;
    let mut test = match cfg.test_subsample {
        Some(n) if n < test.len() => subsample(test, n, seed)?,
        _ => test.clone(),
    };
    if test.classes != train.classes {
        test.classes = test.classes.max(train.classes);
        train.classes = test.classes;
        val.classes = test.classes;
    }
    let norm = Normalizer::fit(&train);
    for ds in [&mut train, &mut val, &mut test] {
        norm.apply(ds)?;
    }

    let accountant = cfg.account_memory.then(MemoryAccountant::new);
    let guard = accountant.as_ref().map(MemoryAccountant::scope);

    let rng = Rng::new(seed);
    let spec = graph_spec(cfg, &train)?;
    let mut graph: BlockGraph<f32> = spec.build(&mut rng.fork(10))?;
    if let Some(p) = &cfg.checkpoint_in {
        let report = load_into(&read_checkpoint(p)?, &mut graph)?;
        log::info!(
            "{}: loaded {} tensors, {} fresh, {} ignored",
            p.display(),
            report.loaded.len(),
            report.fresh.len(),
            report.ignored.len()
        );
    }
    let mut state = TrainState::new(&graph, cfg.lr, cfg.lr_classifier(), cfg.weight_decay)?.with_patience(
        cfg.plateau_patience,
        cfg.plateau_factor,
        cfg.early_stop_patience,
    );
    let mut ctx = Ctx::train(exec, rng.fork(11));
    let opts = StepOptions {
        pipelined: cfg.pipelined,
    };
    let pairs = needs_pairs(&graph);
    let ensemble_from = usize::from(cfg.exclude_first_block);
    let bp = graph.mode() == TrainMode::Bp;

    let mut rows = Vec::new();
    let mut best: Option<(usize, f64, BlockGraph<f32>)> = None;
    let mut epochs_run = 0;
    let mut stopped_early = false;
    let mut peak_bytes = 0;
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        if let Some(a) = &accountant {
            a.reset_peak();
        }
        let shuffle = rng.fork(1000 + epoch as u64).next_u64();
        let mut sums: Vec<f64> = Vec::new();
        let mut seen = 0usize;
        for batch in train.batches(cfg.batch_size, Some(shuffle)) {
            let batch = batch?;
            let n = batch.labels.len();
            if pairs && n < 2 {
                log::warn!("epoch {epoch}: skipping a trailing batch of one sample");
                continue;
            }
            let losses = train_minibatch(&mut graph, batch.images, &batch.labels, &mut state, &mut ctx, opts)?;
            sums.resize(losses.len(), 0.0);
            for (s, l) in sums.iter_mut().zip(&losses) {
                *s += l * n as f64;
            }
            seen += n;
        }
        let epoch_peak = accountant.as_ref().map_or(0, MemoryAccountant::peak_bytes);
        peak_bytes = peak_bytes.max(epoch_peak);
        let lrs = state.lrs();
        let ev = evaluate(&mut graph, &val, cfg.batch_size, exec, ensemble_from)?;
        let seconds = if cfg.deterministic { 0.0 } else { t0.elapsed().as_secs_f64() };
        for (b, &lr) in lrs.iter().enumerate() {
            let block = (!bp).then_some(b);
            rows.push(MetricsRow {
                epoch,
                block,
                split: "train",
                loss: sums.get(b).map_or(f64::NAN, |s| s / seen.max(1) as f64),
                lr,
                acc_ensemble: None,
                acc_block: None,
                seconds,
                peak_bytes: epoch_peak,
            });
            rows.push(MetricsRow {
                epoch,
                block,
                split: "val",
                loss: ev.losses[b],
                lr,
                acc_ensemble: Some(ev.accuracy),
                acc_block: ev.block_accuracy.get(b).copied(),
                seconds,
                peak_bytes: epoch_peak,
            });
        }
        log::info!("seed {seed} epoch {epoch}: val accuracy {:.4}", ev.accuracy);
        state.plateau_update(&ev.losses);
        epochs_run = epoch;
        if best.as_ref().is_none_or(|(_, a, _)| ev.accuracy > *a) {
            best = Some((epoch, ev.accuracy, graph.clone()));
        }
        if state.early.update(ev.accuracy) == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    drop(guard);

    let (best_epoch, best_val, mut graph) = best.ok_or_else(|| Error::Config("no epoch completed".into()))?;
    let tr = evaluate(&mut graph, &test, cfg.batch_size, exec, ensemble_from)?;

    let dir = cfg.out_dir.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_metrics(&dir.join("metrics.csv"), &rows)?;
    let checkpoint = dir.join("model.ckpt");
    save_checkpoint(&graph, seed, Some(&norm), &checkpoint)?;
    if let Some(out) = &cfg.checkpoint_out {
        let target = if cfg.seeds.len() == 1 {
            out.clone()
        } else {
            let mut s = out.as_os_str().to_owned();
            s.push(format!(".seed{seed}"));
            PathBuf::from(s)
        };
        save_checkpoint(&graph, seed, Some(&norm), &target)?;
    }
    Ok(RunOutcome {
        summary: SeedSummary {
            seed,
            epochs_run,
            stopped_early,
            best_epoch,
            best_val_accuracy: best_val,
            test_accuracy: tr.accuracy,
            test_block_accuracy: tr.block_accuracy,
            params: graph.count_params(),
            wall_seconds: if cfg.deterministic { 0.0 } else { wall.elapsed().as_secs_f64() },
            peak_bytes,
        },
        rows,
        dir,
        checkpoint,
    })
}

/// Train every configured seed and write `summary.json` with per-seed
/// results and their mean and standard deviation.
pub fn run_experiment(cfg: &TrainConfig) -> Result<(Summary, Vec<RunOutcome>)> {
    cfg.validate()?;
    let (pool, test) = load_data(cfg)?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, &pool, &test, s))
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<SeedSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let summary = Summary {
        config: cfg.clone(),
        aggregate: aggregate(&seeds),
        seeds,
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_summary(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok((summary, runs))
}

/// Continue training from a checkpoint, typically an end-to-end model
/// refined block-locally. Heads absent from the checkpoint start fresh.
pub fn finetune(cfg: &TrainConfig, checkpoint: &Path) -> Result<(Summary, Vec<RunOutcome>)> {
    let cfg = TrainConfig {
        checkpoint_in: Some(checkpoint.to_path_buf()),
        ..cfg.clone()
    };
    run_experiment(&cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    /// Peak live tensor bytes over one training step.
    pub measured: usize,
    /// Prediction from the graph structure alone.
    pub estimated: usize,
}

/// Run one sequential training step under an accountant installed before
/// the graph and optimizer exist, and compare with the estimate.
pub fn memory_account(spec: &GraphSpec, batch: usize, seed: u64) -> Result<MemoryReport> {
    let acc = MemoryAccountant::new();
    let _guard = acc.scope();
    let mut rng = Rng::new(seed);
    let mut graph: BlockGraph<f32> = spec.build(&mut rng)?;
    let mut state = TrainState::new(&graph, 3e-4, 3e-4, 1e-6)?;
    let x = Tensor::randn(&graph.input_shape(batch), &mut rng)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % graph.classes()).collect();
    let mut ctx = Ctx::train(Exec::Sequential, rng.fork(1));
    train_minibatch(&mut graph, x, &labels, &mut state, &mut ctx, StepOptions::default())?;
    Ok(MemoryReport {
        measured: acc.peak_bytes(),
        estimated: peak_activation_estimate(&graph, batch)?,
    })
}
