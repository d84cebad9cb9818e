//! Minibatch steps for the three training modes, evaluation, experiment
//! orchestration, metrics and checkpoints.

mod checkpoint;
mod config;
mod metrics;
mod run;

pub use checkpoint::{load_into, read_checkpoint, save_checkpoint, Checkpoint, Descriptor, LoadReport, CHECKPOINT_MAGIC};
pub use config::{DatasetFormat, TrainConfig, SWEEP_LR, SWEEP_WD};
pub use metrics::{aggregate, Aggregate, MeanStd, MetricsRow, SeedSummary, Summary, METRICS_HEADER};
pub use run::{finetune, load_data, memory_account, run_experiment, run_seed, MemoryReport, RunOutcome};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::goodness::{goodness_cwc, goodness_cwc_backward, GoodnessMatrix};
use crate::layers::{Cache, Ctx, Layer};
use crate::losses::{cross_entropy, loss_cwc, loss_sff, LossValue};
use crate::model::{layers_backward, Block, BlockGraph, TrainMode};
use crate::optim::{AdamW, Direction, EarlyStop, PlateauScheduler};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Optimizer and scheduler owned by one block.
#[derive(Debug, Clone)]
pub struct BlockState<T> {
    pub opt: AdamW<T>,
    pub sched: PlateauScheduler,
}

#[derive(Debug, Clone)]
pub enum Optimizers<T> {
    /// One per block, block-local modes.
    Local(Vec<BlockState<T>>),
    /// End-to-end: feature layers and classifier with separate rates.
    Global {
        features: AdamW<T>,
        classifier: AdamW<T>,
        sched: PlateauScheduler,
    },
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub optim: Optimizers<T>,
    pub early: EarlyStop,
}

impl<T: Real> TrainState<T> {
    pub fn new(graph: &BlockGraph<T>, lr: f64, lr_classifier: f64, weight_decay: f64) -> Result<Self> {
        let optim = match graph.mode() {
            TrainMode::Bp => {
                let features: Vec<&Tensor<T>> = graph.blocks.iter().flat_map(|b| b.params()).collect();
                let cls: Vec<&Tensor<T>> = graph.classifier.iter().flat_map(|l| l.params()).collect();
                Optimizers::Global {
                    features: AdamW::new(&features, lr, weight_decay)?,
                    classifier: AdamW::new(&cls, lr_classifier, weight_decay)?,
                    sched: PlateauScheduler::new(Direction::Min),
                }
            }
            _ => Optimizers::Local(
                graph
                    .blocks
                    .iter()
                    .map(|b| {
                        Ok(BlockState {
                            opt: AdamW::new(&b.params(), lr, weight_decay)?,
                            sched: PlateauScheduler::new(Direction::Min),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            optim,
            early: EarlyStop::default(),
        })
    }

    pub fn with_patience(mut self, plateau: usize, factor: f64, early: usize) -> Self {
        match &mut self.optim {
            Optimizers::Local(v) => {
                for s in v {
                    s.sched = PlateauScheduler::with(Direction::Min, plateau, factor);
                }
            }
            Optimizers::Global { sched, .. } => *sched = PlateauScheduler::with(Direction::Min, plateau, factor),
        }
        self.early = EarlyStop::new(early);
        self
    }

    /// Current learning rate of each block (BP: the feature rate, once).
    pub fn lrs(&self) -> Vec<f64> {
        match &self.optim {
            Optimizers::Local(v) => v.iter().map(|s| s.opt.lr).collect(),
            Optimizers::Global { features, .. } => vec![features.lr],
        }
    }

    /// Feed validation losses (one per block, or one global) to the
    /// schedulers.
    pub fn plateau_update(&mut self, val_losses: &[f64]) {
        match &mut self.optim {
            Optimizers::Local(v) => {
                for (s, &l) in v.iter_mut().zip(val_losses) {
                    s.opt.lr = s.sched.update(l, s.opt.lr);
                }
            }
            Optimizers::Global {
                features,
                classifier,
                sched,
            } => {
                let before = features.lr;
                let after = sched.update(val_losses[0], before);
                if after != before {
                    features.lr = after;
                    classifier.lr *= sched.factor;
                }
            }
        }
    }
}

/// Per-minibatch options.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepOptions {
    /// Overlap each block's update with the next block's forward pass.
    pub pipelined: bool,
}

struct Forwarded<T> {
    y: Tensor<T>,
    caches: Vec<Cache<T>>,
}

fn forward_block<T: Real>(
    block: &mut Block<T>,
    x: Tensor<T>,
    ctx: &mut Ctx,
    want_next: bool,
) -> Result<(Forwarded<T>, Option<Tensor<T>>)> {
    if !block.trainable {
        let mut eval = Ctx::eval(ctx.exec);
        let (y, _) = block.forward(x, &mut eval)?;
        let next = match &block.post_norm {
            Some(ln) => ln.apply(&y)?,
            None => y.clone(),
        };
        return Ok((
            Forwarded {
                y,
                caches: Vec::new(),
            },
            Some(next),
        ));
    }
    let (y, caches) = block.forward(x, ctx)?;
    let next = if want_next {
        Some(match &block.post_norm {
            Some(ln) => ln.apply(&y)?,
            None => y.clone(),
        })
    } else {
        None
    };
    Ok((Forwarded { y, caches }, next))
}

/// Local loss, backward confined to the block (and its head), and one
/// optimizer step. Returns the loss.
fn update_block<T: Real>(
    block: &mut Block<T>,
    index: usize,
    mode: TrainMode,
    classes: usize,
    f: Forwarded<T>,
    labels: &[usize],
    state: &mut BlockState<T>,
    exec: Exec,
) -> Result<f64> {
    if !block.trainable {
        return Ok(0.0);
    }
    let Forwarded { y, caches } = f;
    let (loss, mut grads, head_grads) = match mode {
        TrainMode::Sff => {
            let head = block
                .head
                .as_ref()
                .ok_or_else(|| Error::Config("block-local SFF step on a block without a head".into()))?;
            let (g, hc) = head.forward(y, exec, index)?;
            let (LossValue { scalar, .. }, dg) = loss_sff(&g, labels)?;
            drop(g);
            let hg = head.backward(hc, &dg, exec)?;
            drop(dg);
            let dy = hg.dx.expect("head input gradient is always requested");
            let (_, grads) = block.backward(caches, dy, false, exec)?;
            (scalar, grads, hg.params)
        }
        TrainMode::Cwc => {
            let g = goodness_cwc(&y, classes)?;
            let (LossValue { scalar, .. }, dg) = loss_cwc(&g, labels)?;
            drop(g);
            let dy = goodness_cwc_backward(&y, &dg)?;
            drop(dg);
            drop(y);
            let (_, grads) = block.backward(caches, dy, false, exec)?;
            (scalar, grads, Vec::new())
        }
        TrainMode::Bp => return Err(Error::Config("block-local step in BP mode".into())),
    };
    grads.extend(head_grads);
    state.opt.step(block.params_mut(), &grads)?;
    Ok(loss.to_f64_lossy())
}

fn check_batch<T: Real>(graph: &BlockGraph<T>, x: &Tensor<T>, labels: &[usize]) -> Result<()> {
    let expect = graph.input_shape(labels.len());
    if x.shape() != expect.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "train_minibatch",
            expected: expect,
            got: x.shape().to_vec(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= graph.classes()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: graph.classes(),
        });
    }
    Ok(())
}

fn train_local<T: Real>(
    graph: &mut BlockGraph<T>,
    x: Tensor<T>,
    labels: &[usize],
    state: &mut TrainState<T>,
    ctx: &mut Ctx,
    opts: StepOptions,
) -> Result<Vec<f64>> {
    check_batch(graph, &x, labels)?;
    let mode = graph.mode();
    let classes = graph.classes();
    let Optimizers::Local(states) = &mut state.optim else {
        return Err(Error::Config("block-local step with end-to-end optimizer state".into()));
    };
    let k = graph.blocks.len();
    let exec = ctx.exec;
    let mut ctxs: Vec<Ctx> = (0..k)
        .map(|_| Ctx::train(exec, Rng::new(ctx.rng.next_u64())))
        .collect();
    let mut losses = Vec::with_capacity(k);

    if !opts.pipelined {
        let mut h = x;
        for b in 0..k {
            let block = &mut graph.blocks[b];
            let (f, next) = forward_block(block, h, &mut ctxs[b], b + 1 < k).map_err(|e| e.in_block(b))?;
            let loss = update_block(block, b, mode, classes, f, labels, &mut states[b], exec).map_err(|e| e.in_block(b))?;
            losses.push(loss);
            match next {
                Some(n) => h = n,
                None => break,
            }
        }
        return Ok(losses);
    }

    let (f0, mut next) = forward_block(&mut graph.blocks[0], x, &mut ctxs[0], k > 1).map_err(|e| e.in_block(0))?;
    let mut pending = Some(f0);
    for b in 0..k {
        let (head, tail) = graph.blocks.split_at_mut(b + 1);
        let block = &mut head[b];
        let f = pending.take().expect("forwarded block");
        let (state_b, ctx_next) = (&mut states[b], ctxs.get_mut(b + 1));
        let upstream = next.take();
        let (loss, fwd) = exec::join(
            exec,
            || update_block(block, b, mode, classes, f, labels, state_b, exec),
            || match (tail.first_mut(), upstream, ctx_next) {
                (Some(nb), Some(h), Some(c)) => Some(forward_block(nb, h, c, b + 2 < k)),
                _ => None,
            },
        );
        losses.push(loss.map_err(|e| e.in_block(b))?);
        if let Some(r) = fwd {
            let (f, n) = r.map_err(|e| e.in_block(b + 1))?;
            pending = Some(f);
            next = n;
        }
    }
    Ok(losses)
}

/// One minibatch of block-local training with head goodness. Returns the
/// local loss of each block.
pub fn train_minibatch_sff<T: Real>(
    graph: &mut BlockGraph<T>,
    x: Tensor<T>,
    labels: &[usize],
    state: &mut TrainState<T>,
    ctx: &mut Ctx,
    opts: StepOptions,
) -> Result<Vec<f64>> {
    if graph.mode() != TrainMode::Sff {
        return Err(Error::Config(format!("graph is in {} mode, not sff", graph.mode())));
    }
    train_local(graph, x, labels, state, ctx, opts)
}

/// One minibatch of block-local training with channel-group goodness.
pub fn train_minibatch_cwc<T: Real>(
    graph: &mut BlockGraph<T>,
    x: Tensor<T>,
    labels: &[usize],
    state: &mut TrainState<T>,
    ctx: &mut Ctx,
    opts: StepOptions,
) -> Result<Vec<f64>> {
    if graph.mode() != TrainMode::Cwc {
        return Err(Error::Config(format!("graph is in {} mode, not cwc", graph.mode())));
    }
    train_local(graph, x, labels, state, ctx, opts)
}

/// One minibatch of end-to-end training. Returns the batch loss.
pub fn train_minibatch_bp<T: Real>(
    graph: &mut BlockGraph<T>,
    x: Tensor<T>,
    labels: &[usize],
    state: &mut TrainState<T>,
    ctx: &mut Ctx,
) -> Result<f64> {
    if graph.mode() != TrainMode::Bp || graph.classifier.is_empty() {
        return Err(Error::Config("end-to-end step needs a bp graph with a classifier".into()));
    }
    check_batch(graph, &x, labels)?;
    let exec = ctx.exec;
    let Optimizers::Global {
        features,
        classifier,
        ..
    } = &mut state.optim
    else {
        return Err(Error::Config("end-to-end step with block-local optimizer state".into()));
    };
    let mut h = x;
    let mut block_caches = Vec::with_capacity(graph.blocks.len());
    for (b, block) in graph.blocks.iter_mut().enumerate() {
        let (y, c) = block.forward(h, ctx).map_err(|e| e.in_block(b))?;
        block_caches.push(c);
        h = y;
    }
    let mut cls_caches = Vec::with_capacity(graph.classifier.len());
    for l in &mut graph.classifier {
        let (y, c) = l.forward(h, ctx)?;
        cls_caches.push(c);
        h = y;
    }
    let (LossValue { scalar, .. }, dlogits) = cross_entropy(&h, labels)?;
    drop(h);
    let (dx, cls_grads) = layers_backward(&graph.classifier, cls_caches, dlogits, true, exec)?;
    let mut dy = dx;
    let mut per_block: Vec<Vec<Tensor<T>>> = Vec::with_capacity(graph.blocks.len());
    for (b, (block, caches)) in graph.blocks.iter().zip(block_caches).enumerate().rev() {
        let upstream = dy.take().expect("gradient flows into every block");
        let (dx, g) = block.backward(caches, upstream, b > 0, exec).map_err(|e| e.in_block(b))?;
        per_block.push(g);
        dy = dx;
    }
    per_block.reverse();
    let grads: Vec<Tensor<T>> = per_block.into_iter().flatten().collect();
    let params: Vec<&mut Tensor<T>> = graph.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
    features.step(params, &grads)?;
    classifier.step(graph.classifier_params_mut(), &cls_grads)?;
    Ok(scalar.to_f64_lossy())
}

/// Dispatch on the graph's mode. Local modes return one loss per block,
/// BP a single loss.
pub fn train_minibatch<T: Real>(
    graph: &mut BlockGraph<T>,
    x: Tensor<T>,
    labels: &[usize],
    state: &mut TrainState<T>,
    ctx: &mut Ctx,
    opts: StepOptions,
) -> Result<Vec<f64>> {
    match graph.mode() {
        TrainMode::Bp => Ok(vec![train_minibatch_bp(graph, x, labels, state, ctx)?]),
        _ => train_local(graph, x, labels, state, ctx, opts),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Goodness-ensemble accuracy, or classifier accuracy in BP mode.
    pub accuracy: f64,
    /// Argmax accuracy of each block's goodness alone (empty in BP mode).
    pub block_accuracy: Vec<f64>,
    /// Mean validation loss per block, or the single global loss.
    pub losses: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Class prediction by averaging goodness over blocks `from..` and taking
/// the argmax.
pub fn ensemble_predict<T: Real>(goodness: &[GoodnessMatrix<T>], from: usize) -> Vec<usize> {
    let used = &goodness[from.min(goodness.len().saturating_sub(1))..];
    let n = used[0].rows();
    let j = used[0].classes();
    let inv = 1.0 / used.len() as f64;
    (0..n)
        .map(|i| {
            let mut mean = vec![0.0; j];
            for g in used {
                for (m, v) in mean.iter_mut().zip(g.row(i)) {
                    *m += v.to_f64_lossy() * inv;
                }
            }
            argmax(&mean)
        })
        .collect()
}

/// Accuracy and losses in evaluation mode (running batch-norm statistics,
/// no dropout). `ensemble_from` drops the first blocks from the ensemble.
pub fn evaluate(
    graph: &mut BlockGraph<f32>,
    ds: &Dataset,
    batch_size: usize,
    exec: Exec,
    ensemble_from: usize,
) -> Result<EvalResult> {
    let mode = graph.mode();
    let blocks = graph.blocks.iter().filter(|b| b.trainable).count();
    let mut correct = 0usize;
    let mut block_correct = vec![0usize; blocks];
    let mut loss_sums = vec![0.0f64; if mode == TrainMode::Bp { 1 } else { blocks }];
    for batch in ds.batches(batch_size, None) {
        let batch = batch?;
        let n = batch.labels.len();
        let scores = graph.scores(batch.images, exec)?;
        let preds = match (&scores.logits, mode) {
            (Some(logits), TrainMode::Bp) => {
                let (l, _) = cross_entropy(logits, &batch.labels)?;
                loss_sums[0] += l.scalar as f64 * n as f64;
                let j = logits.shape()[1];
                logits
                    .data()
                    .chunks_exact(j)
                    .map(|r| argmax(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
                    .collect()
            }
            _ => {
                for (b, g) in scores.goodness.iter().enumerate() {
                    let (l, _) = match mode {
                        TrainMode::Sff => loss_sff(g, &batch.labels)?,
                        _ => loss_cwc(g, &batch.labels)?,
                    };
                    loss_sums[b] += l.scalar as f64 * n as f64;
                    let single = ensemble_predict(std::slice::from_ref(g), 0);
                    block_correct[b] += single.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
                }
                ensemble_predict(&scores.goodness, ensemble_from)
            }
        };
        correct += preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    let total = ds.len() as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / total,
        block_accuracy: if mode == TrainMode::Bp {
            Vec::new()
        } else {
            block_correct.iter().map(|&c| c as f64 / total).collect()
        },
        losses: loss_sums.iter().map(|s| s / total).collect(),
    })
}

/// Whether training-mode forward passes need at least two samples.
pub fn needs_pairs<T: Real>(graph: &BlockGraph<T>) -> bool {
    fn has_bn<T: Real>(l: &Layer<T>) -> bool {
        matches!(l, Layer::BatchNorm(_) | Layer::Residual(_))
    }
    graph.blocks.iter().flat_map(|b| b.layers.iter()).any(has_bn)
}
