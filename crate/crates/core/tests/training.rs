use sff_core::data::Dataset;
use sff_core::goodness::goodness_cwc;
use sff_core::layers::{Cache, Ctx, Layer};
use sff_core::losses::{cross_entropy, loss_cwc, loss_sff};
use sff_core::model::{Block, BlockGraph, GraphSpec, Preset, TrainMode};
use sff_core::trainer::{evaluate, train_minibatch, StepOptions, TrainState};
use sff_core::{Exec, Real, Rng, Tensor};

fn opts() -> StepOptions {
    StepOptions::default()
}

fn build<T: Real>(preset: Preset, mode: TrainMode, classes: usize, input: [usize; 3], widths: Vec<usize>, seed: u64) -> BlockGraph<T> {
    GraphSpec::with_widths(preset, mode, classes, input, widths)
        .unwrap()
        .build(&mut Rng::new(seed))
        .unwrap()
}

fn data<T: Real>(n: usize, shape: [usize; 3], classes: usize, seed: u64) -> (Tensor<T>, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let [c, h, w] = shape;
    (
        Tensor::randn(&[n, c, h, w], &mut rng).unwrap(),
        (0..n).map(|i| i % classes).collect(),
    )
}

fn one_step(g: &mut BlockGraph<f32>, x: &Tensor<f32>, y: &[usize]) {
    let mut st = TrainState::new(g, 1e-3, 1e-3, 1e-6).unwrap();
    let mut ctx = Ctx::train(Exec::Sequential, Rng::new(7));
    train_minibatch(g, x.clone(), y, &mut st, &mut ctx, opts()).unwrap();
}

fn bits(block: &Block<f32>) -> Vec<Vec<u32>> {
    block
        .params()
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn downstream_blocks_cannot_touch_upstream_updates() {
    let shape = [3, 16, 16];
    let (x, y) = data::<f32>(8, shape, 10, 1);
    let reference = build::<f32>(Preset::Cnnb, TrainMode::Sff, 10, shape, vec![8, 16, 16], 3);
    let mut base = reference.clone();
    one_step(&mut base, &x, &y);

    let mut zeroed = reference.clone();
    for p in zeroed.blocks[1].params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut perturbed = reference.clone();
    let mut rng = Rng::new(99);
    for b in &mut perturbed.blocks[1..] {
        for p in b.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += rng.normal() as f32);
        }
    }
    let mut truncated = reference.clone();
    truncated.blocks.truncate(1);

    for variant in [&mut zeroed, &mut perturbed, &mut truncated] {
        one_step(variant, &x, &y);
        assert_eq!(bits(&variant.blocks[0]), bits(&base.blocks[0]));
    }
    assert_eq!(bits(&perturbed.blocks[0]), bits(&base.blocks[0]));

    let mut late = reference.clone();
    for p in late.blocks[2].params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v *= -3.0);
    }
    one_step(&mut late, &x, &y);
    assert_eq!(bits(&late.blocks[1]), bits(&base.blocks[1]));
}

/// Loss of one block (and its head) on a fixed input, in training mode.
fn block_loss(block: &Block<f64>, mode: TrainMode, classes: usize, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let mut b = block.clone();
    let (out, _) = b.forward(x.clone(), &mut Ctx::train(Exec::Sequential, Rng::new(0))).unwrap();
    match mode {
        TrainMode::Sff => {
            let (g, _) = b.head.as_ref().unwrap().forward(out, Exec::Sequential, 0).unwrap();
            loss_sff(&g, y).unwrap().0.scalar
        }
        _ => loss_cwc(&goodness_cwc(&out, classes).unwrap(), y).unwrap().0.scalar,
    }
}

fn block_inputs(g: &BlockGraph<f64>, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut g = g.clone();
    let mut h = x.clone();
    let mut v = Vec::new();
    for b in &mut g.blocks {
        v.push(h.clone());
        let (out, _) = b.forward(h, &mut Ctx::train(Exec::Sequential, Rng::new(0))).unwrap();
        h = b.post_norm.as_ref().unwrap().apply(&out).unwrap();
    }
    v
}

#[test]
fn one_small_step_lowers_each_local_loss() {
    for preset in [Preset::Cnn, Preset::Cnnb, Preset::TinyResnet] {
        for mode in [TrainMode::Sff, TrainMode::Cwc] {
            let shape = [2, 8, 8];
            let (x, y) = data::<f64>(12, shape, 4, 5);
            let mut g = build::<f64>(preset, mode, 4, shape, vec![4, 8, 8], 2);
            let inputs = block_inputs(&g, &x);
            let before: Vec<f64> = g.blocks.iter().zip(&inputs).map(|(b, h)| block_loss(b, mode, 4, h, &y)).collect();
            let mut st = TrainState::new(&g, 1e-4, 1e-4, 0.0).unwrap();
            let mut ctx = Ctx::train(Exec::Sequential, Rng::new(0));
            let reported = train_minibatch(&mut g, x.clone(), &y, &mut st, &mut ctx, opts()).unwrap();
            for (b, (block, h)) in g.blocks.iter().zip(&inputs).enumerate() {
                let after = block_loss(block, mode, 4, h, &y);
                assert!((reported[b] - before[b]).abs() < 1e-12);
                assert!(after <= before[b], "{preset} {mode} block {b}: {} -> {after}", before[b]);
            }
        }
    }
}

#[test]
fn zero_batch_gives_log_j_per_block() {
    for preset in [Preset::Cnn, Preset::Cnnb] {
        let mut g = build::<f64>(preset, TrainMode::Cwc, 5, [1, 8, 8], vec![5, 10, 10], 0);
        let mut st = TrainState::new(&g, 1e-3, 1e-3, 0.0).unwrap();
        let mut ctx = Ctx::train(Exec::Sequential, Rng::new(0));
        let x = Tensor::zeros(&[4, 1, 8, 8]).unwrap();
        let losses = train_minibatch(&mut g, x, &[0, 1, 2, 3], &mut st, &mut ctx, opts()).unwrap();
        for l in losses {
            assert!((l - 5f64.ln()).abs() < 1e-12, "{l}");
        }
    }
}

#[test]
fn cwc_trace_equals_sff_with_identity_head() {
    let j = 4;
    let shape = [1, 8, 8];
    let mut sff = build::<f64>(Preset::Cnn, TrainMode::Sff, j, shape, vec![4, 8, 8], 11);
    let mut cwc = build::<f64>(Preset::Cnn, TrainMode::Cwc, j, shape, vec![4, 8, 8], 11);
    sff.blocks.truncate(1);
    cwc.blocks.truncate(1);
    assert_eq!(sff.blocks[0].layers, cwc.blocks[0].layers);
    let identity = Tensor::from_fn(&[j, j, 1, 1], |i| if i % (j + 1) == 0 { 1.0 } else { 0.0 }).unwrap();
    let reset = |g: &mut BlockGraph<f64>| {
        let h = g.blocks[0].head.as_mut().unwrap();
        h.conv.weight = identity.clone();
        h.conv.bias = Tensor::zeros(&[j]).unwrap();
    };
    let mut st_s = TrainState::new(&sff, 1e-2, 1e-2, 1e-6).unwrap();
    let mut st_c = TrainState::new(&cwc, 1e-2, 1e-2, 1e-6).unwrap();
    let mut ctx_s = Ctx::train(Exec::Sequential, Rng::new(0));
    let mut ctx_c = Ctx::train(Exec::Sequential, Rng::new(0));
    for step in 0..10 {
        reset(&mut sff);
        let (x, y) = data::<f64>(8, shape, j, step);
        let ls = train_minibatch(&mut sff, x.clone(), &y, &mut st_s, &mut ctx_s, opts()).unwrap();
        let lc = train_minibatch(&mut cwc, x, &y, &mut st_c, &mut ctx_c, opts()).unwrap();
        assert!((ls[0] - lc[0]).abs() < 1e-10, "step {step}: {ls:?} vs {lc:?}");
        for (a, b) in sff.blocks[0].layers.iter().flat_map(|l| l.params()).zip(cwc.blocks[0].layers.iter().flat_map(|l| l.params())) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-9, "step {step}");
            }
        }
    }
}

/// Whole-network cross-entropy in training mode with a fixed dropout mask.
fn bp_loss(g: &BlockGraph<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let mut g = g.clone();
    let mut ctx = Ctx::train(Exec::Sequential, Rng::new(42));
    let mut h = x.clone();
    for l in g.blocks.iter_mut().flat_map(|b| b.layers.iter_mut()).chain(g.classifier.iter_mut()) {
        h = l.forward(h, &mut ctx).unwrap().0;
    }
    cross_entropy(&h, y).unwrap().0.scalar
}

#[test]
fn bp_first_conv_gradient_matches_finite_differences() {
    for preset in [Preset::Cnn, Preset::Cnnb, Preset::TinyResnet] {
        let shape = [2, 8, 8];
        let (x, y) = data::<f64>(3, shape, 3, 8);
        let g = build::<f64>(preset, TrainMode::Bp, 3, shape, vec![2, 3, 4], 4);

        let mut work = g.clone();
        let mut ctx = Ctx::train(Exec::Sequential, Rng::new(42));
        let mut h = x.clone();
        let mut caches: Vec<Cache<f64>> = Vec::new();
        let layers: Vec<&mut Layer<f64>> = work.blocks.iter_mut().flat_map(|b| b.layers.iter_mut()).chain(work.classifier.iter_mut()).collect();
        let n_layers = layers.len();
        for l in layers {
            let (out, c) = l.forward(h, &mut ctx).unwrap();
            caches.push(c);
            h = out;
        }
        let (_, mut dy) = cross_entropy(&h, &y).unwrap();
        let all: Vec<&Layer<f64>> = work.blocks.iter().flat_map(|b| b.layers.iter()).chain(work.classifier.iter()).collect();
        let mut first_grads = Vec::new();
        for (i, (l, c)) in all.into_iter().zip(caches).enumerate().rev() {
            let r = l.backward(c, &dy, i > 0, Exec::Sequential).unwrap();
            if i == 0 {
                first_grads = r.params;
            } else {
                dy = r.dx.unwrap();
            }
        }
        assert_eq!(n_layers, g.blocks.iter().map(|b| b.layers.len()).sum::<usize>() + g.classifier.len());

        let Layer::Conv(_) = &g.blocks[0].layers[0] else { panic!("first layer is a conv") };
        let h_step = 1e-5;
        let w0 = g.blocks[0].layers[0].params()[0].clone();
        let mut num = Vec::with_capacity(w0.len());
        for i in 0..w0.len() {
            let mut plus = g.clone();
            plus.blocks[0].layers[0].params_mut()[0].data_mut()[i] += h_step;
            let mut minus = g.clone();
            minus.blocks[0].layers[0].params_mut()[0].data_mut()[i] -= h_step;
            num.push((bp_loss(&plus, &x, &y) - bp_loss(&minus, &x, &y)) / (2.0 * h_step));
        }
        let a = first_grads[0].data();
        let diff: f64 = a.iter().zip(&num).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-5, "{preset}: {}", diff / scale);
    }
}

#[test]
fn bp_graphs_carry_no_layer_norm() {
    for preset in [Preset::Cnn, Preset::Cnnb, Preset::TinyResnet] {
        let g = build::<f32>(preset, TrainMode::Bp, 10, [3, 32, 32], preset.default_widths(), 0);
        assert!(g.blocks.iter().all(|b| b.post_norm.is_none() && b.head.is_none()));
        assert!(g
            .blocks
            .iter()
            .flat_map(|b| b.layers.iter())
            .chain(g.classifier.iter())
            .all(|l| !matches!(l, Layer::LayerNorm(_))));
    }
}

/// Two classes: a bright blob near one corner or the other, plus noise.
fn blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let mut px = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let (cy, cx) = if label == 0 { (2.0, 2.0) } else { (5.0, 5.0) };
        for r in 0..8 {
            for c in 0..8 {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                px.push(((-d2 / 2.0).exp() + 0.05 * rng.normal()) as f32);
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(&[n, 1, 8, 8], px).unwrap(), labels, 2, "blobs").unwrap()
}

#[test]
fn separable_blobs_reach_full_ensemble_accuracy() {
    let train = blobs(64, 0);
    let test = blobs(64, 1);
    for mode in [TrainMode::Sff, TrainMode::Cwc] {
        let mut g = build::<f32>(Preset::Cnn, mode, 2, [1, 8, 8], vec![4, 8, 8], 0);
        let mut st = TrainState::new(&g, 3e-3, 3e-3, 0.0).unwrap();
        let mut ctx = Ctx::train(Exec::Sequential, Rng::new(0));
        let mut reached = None;
        for epoch in 1..=50 {
            for b in train.batches(16, Some(epoch)) {
                let b = b.unwrap();
                train_minibatch(&mut g, b.images, &b.labels, &mut st, &mut ctx, opts()).unwrap();
            }
            if evaluate(&mut g, &test, 64, Exec::Sequential, 0).unwrap().accuracy == 1.0 {
                reached = Some(epoch);
                break;
            }
        }
        assert!(reached.is_some(), "{mode} never reached 100%");
    }
}

#[test]
fn single_block_ensemble_equals_block_accuracy() {
    let ds = blobs(40, 3);
    let mut g = build::<f32>(Preset::Cnn, TrainMode::Sff, 2, [1, 8, 8], vec![4, 8, 8], 0);
    g.blocks.truncate(1);
    let r = evaluate(&mut g, &ds, 16, Exec::Sequential, 0).unwrap();
    assert_eq!(r.block_accuracy, vec![r.accuracy]);
}

#[test]
fn parallel_and_sequential_training_agree_bitwise() {
    let shape = [3, 12, 12];
    for (preset, mode) in [(Preset::Cnnb, TrainMode::Sff), (Preset::TinyResnet, TrainMode::Bp), (Preset::Cnn, TrainMode::Cwc)] {
        let run = |exec: Exec| {
            let mut g = build::<f32>(preset, mode, 10, shape, vec![8, 16, 16], 1);
            let mut st = TrainState::new(&g, 1e-3, 1e-3, 1e-6).unwrap();
            let mut ctx = Ctx::train(exec, Rng::new(3));
            for s in 0..3 {
                let (x, y) = data::<f32>(16, shape, 10, s);
                train_minibatch(&mut g, x, &y, &mut st, &mut ctx, opts()).unwrap();
            }
            g
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel), "{preset} {mode}");
    }
}
