//! Central finite-difference checks of every analytic backward pass, in f64.

use crate::goodness::{goodness_cwc, goodness_cwc_backward, GoodnessHead, GoodnessMatrix};
use crate::layers::{BatchNorm2d, Conv2d, Ctx, Dropout, Layer, LayerNorm, Linear, Mode, Pool2d, PoolKind, Relu, Residual};
use crate::losses::{cross_entropy, loss_cwc, loss_sff};
use crate::{Exec, Rng, Tensor};

pub const STEP: f64 = 1e-5;
/// Below this norm both gradients are treated as the exact zero (a bias
/// feeding a train-mode batch norm), where relative error is undefined.
pub const ZERO: f64 = 1e-8;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nn) < ZERO {
        return 0.0;
    }
    diff / na.max(nn)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Numerical gradient of `f` with respect to every element of `x`.
pub fn numeric(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += STEP;
            let mut m = x.clone();
            m.data_mut()[i] -= STEP;
            (f(&p) - f(&m)) / (2.0 * STEP)
        })
        .collect()
}

fn ctx(mode: Mode, seed: u64) -> Ctx {
    match mode {
        Mode::Train => Ctx::train(Exec::Sequential, Rng::new(seed ^ 0xd00d)),
        Mode::Eval => Ctx::eval(Exec::Sequential),
    }
}

fn output(layer: &Layer<f64>, x: &Tensor<f64>, mode: Mode, seed: u64) -> Tensor<f64> {
    let mut l = layer.clone();
    l.forward(x.clone(), &mut ctx(mode, seed)).expect("forward").0
}

/// Worst relative error over the input and parameter gradients of one
/// layer on the probe objective `sum(w * layer(x))`.
pub fn layer_error(make: &dyn Fn(&mut Rng) -> Layer<f64>, shape: &[usize], mode: Mode, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut layer = make(&mut rng);
    if let (Mode::Eval, Layer::BatchNorm(bn)) = (mode, &mut layer) {
        bn.running_mean = Tensor::randn(bn.running_mean.shape(), &mut rng).unwrap();
        bn.running_var = Tensor::uniform(bn.running_var.shape(), 0.5, 2.0, &mut rng).unwrap();
        bn.gamma = Tensor::randn(bn.gamma.shape(), &mut rng).unwrap();
    }
    let x = Tensor::randn(shape, &mut rng).unwrap();
    let y = output(&layer, &x, mode, seed);
    let w = Tensor::randn(y.shape(), &mut rng).unwrap();

    let mut l = layer.clone();
    let (_, cache) = l.forward(x.clone(), &mut ctx(mode, seed)).unwrap();
    let g = layer.backward(cache, &w, true, Exec::Sequential).unwrap();

    let dx = numeric(&x, |xp| dot(&output(&layer, xp, mode, seed), &w));
    let mut worst = rel_err(g.dx.as_ref().unwrap().data(), &dx);
    let n_params = layer.params().len();
    if g.params.len() != n_params {
        return f64::INFINITY;
    }
    for p in 0..n_params {
        let base = layer.params()[p].clone();
        let num = numeric(&base, |pp| {
            let mut l = layer.clone();
            *l.params_mut()[p] = pp.clone();
            dot(&output(&l, &x, mode, seed), &w)
        });
        worst = worst.max(rel_err(g.params[p].data(), &num));
    }
    worst
}

/// Worst relative error of the head's input, weight and bias gradients.
pub fn head_error(kernel: usize, squared: bool, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut head: GoodnessHead<f64> = GoodnessHead::new(4, 3, kernel, &mut rng).unwrap();
    head.squared = squared;
    let y = Tensor::randn(&[2, 4, 5, 5], &mut rng).unwrap();
    let w = Tensor::randn(&[2, 3], &mut rng).unwrap();
    let f = |h: &GoodnessHead<f64>, y: &Tensor<f64>| dot(&h.forward(y.clone(), Exec::Sequential, 0).unwrap().0.values, &w);
    let (_, cache) = head.forward(y.clone(), Exec::Sequential, 0).unwrap();
    let g = head.backward(cache, &w, Exec::Sequential).unwrap();
    let e_dy = rel_err(g.dx.as_ref().unwrap().data(), &numeric(&y, |yp| f(&head, yp)));
    let num_w = numeric(&head.conv.weight, |wp| {
        let mut h = head.clone();
        h.conv.weight = wp.clone();
        f(&h, &y)
    });
    let num_b = numeric(&head.conv.bias, |bp| {
        let mut h = head.clone();
        h.conv.bias = bp.clone();
        f(&h, &y)
    });
    e_dy.max(rel_err(g.params[0].data(), &num_w))
        .max(rel_err(g.params[1].data(), &num_b))
}

pub fn channel_group_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let y = Tensor::randn(&[3, 6, 4, 4], &mut rng).unwrap();
    let w = Tensor::randn(&[3, 3], &mut rng).unwrap();
    let dy = goodness_cwc_backward(&y, &w).unwrap();
    let num = numeric(&y, |yp| dot(&goodness_cwc(yp, 3).unwrap().values, &w));
    rel_err(dy.data(), &num)
}

fn matrix(values: &Tensor<f64>) -> GoodnessMatrix<f64> {
    GoodnessMatrix {
        values: values.clone(),
        source_block: 0,
    }
}

/// Errors of the SFF loss, the CwC loss and cross-entropy, in that order.
pub fn loss_errors(seed: u64) -> [f64; 3] {
    let mut rng = Rng::new(seed);
    let j = 2 + (seed as usize % 9);
    let s = Tensor::uniform(&[5, j], -3.0, 3.0, &mut rng).unwrap();
    let labels: Vec<usize> = (0..5).map(|_| rng.below(j)).collect();
    let (_, g1) = loss_sff(&matrix(&s), &labels).unwrap();
    let n1 = numeric(&s, |sp| loss_sff(&matrix(sp), &labels).unwrap().0.scalar);
    let (_, g2) = loss_cwc(&matrix(&s), &labels).unwrap();
    let n2 = numeric(&s, |sp| loss_cwc(&matrix(sp), &labels).unwrap().0.scalar);
    let (_, g3) = cross_entropy(&s, &labels).unwrap();
    let n3 = numeric(&s, |sp| cross_entropy(sp, &labels).unwrap().0.scalar);
    [rel_err(g1.data(), &n1), rel_err(g2.data(), &n2), rel_err(g3.data(), &n3)]
}

/// One family of checks and its worst error over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub name: String,
    pub worst: f64,
}

type Make = Box<dyn Fn(&mut Rng) -> Layer<f64>>;

/// Every layer configuration used by the presets, with its input shape and
/// mode.
pub fn layer_cases() -> Vec<(String, Make, Vec<usize>, Mode)> {
    let mut v: Vec<(String, Make, Vec<usize>, Mode)> = Vec::new();
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0), (3, 1, 0)] {
        v.push((
            format!("conv k{k} s{s} p{p}"),
            Box::new(move |r| Layer::Conv(Conv2d::new(3, 4, k, s, p, r).unwrap())),
            vec![2, 3, 6, 6],
            Mode::Train,
        ));
    }
    for mode in [Mode::Train, Mode::Eval] {
        v.push((
            format!("batchnorm {mode:?}"),
            Box::new(|_| Layer::BatchNorm(BatchNorm2d::new(4).unwrap())),
            vec![3, 4, 3, 3],
            mode,
        ));
    }
    v.push(("relu".into(), Box::new(|_| Layer::Relu(Relu)), vec![2, 3, 4, 4], Mode::Train));
    for kind in [PoolKind::Max, PoolKind::Average] {
        v.push((
            format!("{kind:?} pool"),
            Box::new(move |_| Layer::Pool(Pool2d::new(kind, 2, 2).unwrap())),
            vec![2, 3, 6, 6],
            Mode::Train,
        ));
    }
    for mode in [Mode::Train, Mode::Eval] {
        v.push((
            format!("dropout {mode:?}"),
            Box::new(|_| Layer::Dropout(Dropout::new(0.5).unwrap())),
            vec![3, 10],
            mode,
        ));
    }
    v.push(("layernorm".into(), Box::new(|_| Layer::LayerNorm(LayerNorm::default())), vec![3, 2, 3, 3], Mode::Train));
    v.push(("linear".into(), Box::new(|r| Layer::Linear(Linear::new(7, 5, r).unwrap())), vec![4, 7], Mode::Train));
    v.push(("flatten".into(), Box::new(|_| Layer::Flatten), vec![2, 3, 2, 2], Mode::Train));
    v.push(("global avg pool".into(), Box::new(|_| Layer::GlobalAvgPool), vec![2, 3, 4, 4], Mode::Train));
    v.push((
        "residual identity".into(),
        Box::new(|r| Layer::Residual(Box::new(Residual::new(4, 4, 1, r).unwrap()))),
        vec![2, 4, 4, 4],
        Mode::Train,
    ));
    v.push((
        "residual projection".into(),
        Box::new(|r| Layer::Residual(Box::new(Residual::new(3, 5, 2, r).unwrap()))),
        vec![2, 3, 6, 6],
        Mode::Train,
    ));
    v
}

/// Run every layer, both goodness paths and all three losses over `seeds`
/// seeded instances each.
pub fn suite(seeds: u64) -> Vec<Case> {
    let worst = |f: &dyn Fn(u64) -> f64| (0..seeds).map(f).fold(0.0, f64::max);
    let mut cases: Vec<Case> = layer_cases()
        .into_iter()
        .map(|(name, make, shape, mode)| Case {
            worst: worst(&|s| layer_error(&*make, &shape, mode, s)),
            name,
        })
        .collect();
    for (k, sq) in [(1, true), (3, true), (1, false)] {
        cases.push(Case {
            name: format!("goodness head k{k} squared={sq}"),
            worst: worst(&|s| head_error(k, sq, s)),
        });
    }
    cases.push(Case {
        name: "goodness channel groups".into(),
        worst: worst(&channel_group_error),
    });
    for (i, name) in ["loss sff", "loss cwc", "cross entropy"].into_iter().enumerate() {
        cases.push(Case {
            name: name.into(),
            worst: worst(&|s| loss_errors(s)[i]),
        });
    }
    cases
}
