//! AdamW with decoupled weight decay, reduce-on-plateau, early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &[&Tensor<T>], lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) || !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "adamw: lr {lr} must be positive and weight decay {weight_decay} non-negative"
            )));
        }
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Result<Vec<_>>>();
        Ok(Self {
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros()?,
            v: zeros()?,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One update of every parameter in place.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidShape(format!(
                "adamw: {} moments, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            g.ensure_finite("adamw")?;
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = T::one() - T::lit(self.lr * self.weight_decay);
        let step_size = T::lit(self.lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *pv *= decay;
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let denom = vv.sqrt() / bc2_sqrt + eps;
                *pv -= step_size * *mv / denom;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Min,
    Max,
}

impl Direction {
    fn improves(self, value: f64, best: Option<f64>) -> bool {
        match best {
            None => !value.is_nan(),
            Some(b) => match self {
                Direction::Min => value < b,
                Direction::Max => value > b,
            },
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored value has
/// failed to improve for `patience` consecutive updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub direction: Direction,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub const PATIENCE: usize = 10;
    pub const FACTOR: f64 = 0.1;

    pub fn new(direction: Direction) -> Self {
        Self::with(direction, Self::PATIENCE, Self::FACTOR)
    }

    pub fn with(direction: Direction, patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            direction,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn stale(&self) -> usize {
        self.stale
    }

    /// Feed one epoch's value; returns the new learning rate.
    pub fn update(&mut self, metric: f64, lr: f64) -> f64 {
        if self.direction.improves(metric, self.best) {
            self.best = Some(metric);
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            return lr * self.factor;
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once validation accuracy has not improved for `patience`
/// consecutive epochs. Stays stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    best: Option<f64>,
    stale: usize,
    stopped: bool,
}

impl EarlyStop {
    pub const PATIENCE: usize = 30;

    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
            stopped: false,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn stale(&self) -> usize {
        self.stale
    }

    pub fn update(&mut self, accuracy: f64) -> StopDecision {
        if self.stopped {
            return StopDecision::Stop;
        }
        if Direction::Max.improves(accuracy, self.best) {
            self.best = Some(accuracy);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if self.stale >= self.patience {
            self.stopped = true;
            return StopDecision::Stop;
        }
        StopDecision::Continue
    }
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self::new(Self::PATIENCE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    /// Textbook scalar AdamW, written independently of the tensor version.
    struct ScalarAdamW {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdamW {
        fn step(&mut self, p: f64, g: f64, lr: f64, wd: f64) -> f64 {
            let p = p - lr * wd * p;
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let mh = self.m / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v / (1.0 - 0.999f64.powi(self.t));
            p - lr * mh / (vh.sqrt() + 1e-8)
        }
    }

    fn one(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_grads_no_decay_is_identity() {
        let mut p = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 - 2.0).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(&[&p], 0.1, 0.0).unwrap();
        for _ in 0..5 {
            opt.step(vec![&mut p], &[Tensor::zeros(&[2, 3]).unwrap()]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(1.0);
        let mut opt = AdamW::new(&[&p], 0.1, 0.0).unwrap();
        opt.step(vec![&mut p], &[one(1.0)]).unwrap();
        let mut r = ScalarAdamW { m: 0.0, v: 0.0, t: 0 };
        let want = r.step(1.0, 1.0, 0.1, 0.0);
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_with_zero_grads() {
        let mut p = one(2.0);
        let mut opt = AdamW::new(&[&p], 0.01, 0.5).unwrap();
        opt.step(vec![&mut p], &[one(0.0)]).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.01 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = one(0.0);
        let mut opt = AdamW::new(&[&p], 0.1, 0.0).unwrap();
        assert!(opt.step(vec![&mut p], &[one(f64::NAN)]).is_err());
        assert!(opt.step(vec![&mut p], &[Tensor::zeros(&[2]).unwrap()]).is_err());
        assert!(AdamW::new(&[&p], 0.0, 0.0).is_err());
        assert!(AdamW::new(&[&p], 0.1, -1.0).is_err());
    }

    #[test]
    fn sign_like_steps_for_constant_gradient() {
        for g in [-3e-3, 0.5, 70.0] {
            let mut p = one(0.0);
            let mut opt = AdamW::new(&[&p], 1e-3, 0.0).unwrap();
            let mut prev = 0.0;
            for _ in 0..10_000 {
                prev = p.data()[0];
                opt.step(vec![&mut p], &[one(g)]).unwrap();
            }
            let delta = p.data()[0] - prev;
            assert!((delta + 1e-3 * f64::signum(g)).abs() < 1e-3 * 1e-3, "g={g}: {delta}");
        }
    }

    proptest! {
        #[test]
        fn matches_scalar_reference(seed in 0u64..1000, wd in 0.0f64..0.1, lr in 1e-4f64..1e-1) {
            let mut rng = Rng::new(seed);
            let init: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let mut p = Tensor::new(&[4], init.clone()).unwrap();
            let mut opt = AdamW::new(&[&p], lr, wd).unwrap();
            let mut refs: Vec<(f64, ScalarAdamW)> = init.iter().map(|&v| (v, ScalarAdamW { m: 0.0, v: 0.0, t: 0 })).collect();
            for _ in 0..20 {
                let g: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                opt.step(vec![&mut p], &[Tensor::new(&[4], g.clone()).unwrap()]).unwrap();
                for ((v, r), &gi) in refs.iter_mut().zip(&g) {
                    *v = r.step(*v, gi, lr, wd);
                }
            }
            for (a, (b, _)) in p.data().iter().zip(&refs) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn plateau_constant_on_improvement() {
        let mut s = PlateauScheduler::new(Direction::Min);
        let mut lr = 1.0;
        for i in 0..50 {
            lr = s.update(100.0 - i as f64, lr);
        }
        assert_eq!(lr, 1.0);
    }

    #[test]
    fn plateau_fires_on_tenth_stale_epoch() {
        let mut s = PlateauScheduler::new(Direction::Min);
        let mut lr = 1.0;
        lr = s.update(5.0, lr);
        for i in 1..=10 {
            lr = s.update(5.0, lr);
            if i < 10 {
                assert_eq!(lr, 1.0, "reduced early at stale epoch {i}");
                assert_eq!(s.stale(), i);
            }
        }
        assert!((lr - 0.1).abs() < 1e-15);
        assert_eq!(s.stale(), 0);
        for _ in 0..9 {
            lr = s.update(6.0, lr);
        }
        assert!((lr - 0.1).abs() < 1e-15);
        lr = s.update(6.0, lr);
        assert!((lr - 0.01).abs() < 1e-15);
    }

    #[test]
    fn plateau_counter_resets_on_improvement() {
        let mut s = PlateauScheduler::new(Direction::Max);
        let mut lr = 0.5;
        lr = s.update(0.1, lr);
        for _ in 0..9 {
            lr = s.update(0.1, lr);
        }
        lr = s.update(0.2, lr);
        for _ in 0..9 {
            lr = s.update(0.05, lr);
        }
        assert_eq!(lr, 0.5);
    }

    proptest! {
        #[test]
        fn schedulers_are_independent(a in proptest::collection::vec(0.0f64..1.0, 1..60),
                                      b in proptest::collection::vec(0.0f64..1.0, 1..60)) {
            let solo = |xs: &[f64]| {
                let mut s = PlateauScheduler::new(Direction::Min);
                let mut lr = 1.0;
                xs.iter().map(|&x| { lr = s.update(x, lr); lr }).collect::<Vec<_>>()
            };
            let mut sa = PlateauScheduler::new(Direction::Min);
            let mut sb = PlateauScheduler::new(Direction::Min);
            let (mut la, mut lb) = (1.0, 1.0);
            let (mut ta, mut tb) = (vec![], vec![]);
            for i in 0..a.len().max(b.len()) {
                // interleave in alternating order
                if i % 2 == 0 {
                    if let Some(&x) = b.get(i) { lb = sb.update(x, lb); tb.push(lb); }
                    if let Some(&x) = a.get(i) { la = sa.update(x, la); ta.push(la); }
                } else {
                    if let Some(&x) = a.get(i) { la = sa.update(x, la); ta.push(la); }
                    if let Some(&x) = b.get(i) { lb = sb.update(x, lb); tb.push(lb); }
                }
            }
            prop_assert_eq!(ta, solo(&a));
            prop_assert_eq!(tb, solo(&b));
        }

        #[test]
        fn plateau_lr_never_increases(xs in proptest::collection::vec(-5.0f64..5.0, 1..200)) {
            let mut s = PlateauScheduler::new(Direction::Min);
            let mut lr = 1.0;
            for x in xs {
                let next = s.update(x, lr);
                prop_assert!(next <= lr);
                lr = next;
            }
        }
    }

    #[test]
    fn early_stop_never_fires_while_improving() {
        let mut es = EarlyStop::default();
        for i in 0..200 {
            assert_eq!(es.update(i as f64), StopDecision::Continue);
        }
    }

    #[test]
    fn early_stop_fires_on_thirtieth_stale_epoch() {
        let mut es = EarlyStop::default();
        assert_eq!(es.update(0.5), StopDecision::Continue);
        for i in 1..30 {
            assert_eq!(es.update(0.4), StopDecision::Continue, "stale {i}");
        }
        assert_eq!(es.stale(), 29);
        assert_eq!(es.update(0.5), StopDecision::Stop);
        assert_eq!(es.update(0.9), StopDecision::Stop);
        assert_eq!(es.update(0.1), StopDecision::Stop);
    }
}
