use super::{Cache, Grads, Mode};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Normalized activations and the per-group inverse standard deviations
/// (per channel for batch norm, per sample for layer norm).
#[derive(Debug)]
pub struct NormCache<T> {
    x_hat: Tensor<T>,
    inv_std: Tensor<T>,
    batch_stats: bool,
}

/// Batch normalization over `(N, H, W)` for each channel, affine.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(super) fn check_input(&self, input: &[usize]) -> Result<()> {
        match *input {
            [_, c, _, _] if c == self.channels() => Ok(()),
            _ => Err(Error::ShapeMismatch {
                op: "batchnorm2d",
                expected: vec![0, self.channels(), 0, 0],
                got: input.to_vec(),
            }),
        }
    }

    pub(super) fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        self.check_input(x.shape())?;
        let [n, c, h, w] = x.dims4("batchnorm2d")?;
        let hw = h * w;
        let m = n * hw;
        let eps = T::lit(self.eps);
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (ch, (mu, var)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let mut s = T::zero();
                    for ni in 0..n {
                        let off = (ni * c + ch) * hw;
                        s += x.data()[off..off + hw].iter().copied().sum::<T>();
                    }
                    *mu = s / T::from_usize(m).unwrap();
                    let mut ss = T::zero();
                    for ni in 0..n {
                        let off = (ni * c + ch) * hw;
                        ss += x.data()[off..off + hw]
                            .iter()
                            .map(|&v| (v - *mu) * (v - *mu))
                            .sum::<T>();
                    }
                    *var = ss / T::from_usize(m).unwrap();
                }
                let mom = T::lit(self.momentum);
                let unbias = T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap();
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (T::one() - mom) * *rm + mom * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
                }
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect(),
            ),
        };
        let mut x_hat = x;
        for (i, plane) in x_hat.data_mut().chunks_exact_mut(hw).enumerate() {
            let ch = i % c;
            plane
                .iter_mut()
                .for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
        }
        let g = self.gamma.data();
        let b = self.beta.data();
        let mut y = Tensor::zeros(x_hat.shape())?;
        for (i, (yp, xp)) in y
            .data_mut()
            .chunks_exact_mut(hw)
            .zip(x_hat.data().chunks_exact(hw))
            .enumerate()
        {
            let ch = i % c;
            yp.iter_mut()
                .zip(xp)
                .for_each(|(yv, &xv)| *yv = g[ch] * xv + b[ch]);
        }
        y.ensure_finite("batchnorm2d")?;
        Ok((
            y,
            Cache::BatchNorm(NormCache {
                x_hat,
                inv_std: Tensor::new(&[c], inv_std)?,
                batch_stats: mode == Mode::Train,
            }),
        ))
    }

    pub(super) fn backward(&self, cache: NormCache<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Grads<T>> {
        let NormCache {
            x_hat,
            inv_std,
            batch_stats,
        } = cache;
        if dy.shape() != x_hat.shape() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d_backward",
                expected: x_hat.shape().to_vec(),
                got: dy.shape().to_vec(),
            });
        }
        let [n, c, h, w] = x_hat.dims4("batchnorm2d_backward")?;
        let hw = h * w;
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (i, (dp, xp)) in dy
            .data()
            .chunks_exact(hw)
            .zip(x_hat.data().chunks_exact(hw))
            .enumerate()
        {
            let ch = i % c;
            for (&d, &xv) in dp.iter().zip(xp) {
                dgamma[ch] += d * xv;
                dbeta[ch] += d;
            }
        }
        let dx = if need_dx {
            let g = self.gamma.data();
            let inv = inv_std.data();
            let m = T::from_usize(n * hw).unwrap();
            let mut dx = Tensor::zeros(x_hat.shape())?;
            for (i, (dxp, (dp, xp))) in dx
                .data_mut()
                .chunks_exact_mut(hw)
                .zip(dy.data().chunks_exact(hw).zip(x_hat.data().chunks_exact(hw)))
                .enumerate()
            {
                let ch = i % c;
                if batch_stats {
                    // d x_hat = dy * gamma; dx = inv/M (M dxh - sum dxh - x_hat sum dxh x_hat)
                    let k = g[ch] * inv[ch] / m;
                    for ((o, &d), &xv) in dxp.iter_mut().zip(dp).zip(xp) {
                        *o = k * (m * d - dbeta[ch] - xv * dgamma[ch]);
                    }
                } else {
                    let k = g[ch] * inv[ch];
                    dxp.iter_mut().zip(dp).for_each(|(o, &d)| *o = k * d);
                }
            }
            Some(dx)
        } else {
            None
        };
        Ok(Grads {
            dx,
            params: vec![Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?],
        })
    }
}

/// Parameter-free per-sample normalization over all non-batch axes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub eps: f64,
}

impl Default for LayerNorm {
    fn default() -> Self {
        Self { eps: 1e-5 }
    }
}

impl LayerNorm {
    pub(super) fn forward<T: Real>(&self, x: Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let n = x.shape()[0];
        let f = x.len() / n;
        let fz = T::from_usize(f).unwrap();
        let eps = T::lit(self.eps);
        let mut inv_std = Vec::with_capacity(n);
        let mut x_hat = x;
        for row in x_hat.data_mut().chunks_exact_mut(f) {
            let mean = row.iter().copied().sum::<T>() / fz;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / fz;
            let inv = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        x_hat.ensure_finite("layernorm")?;
        let y = x_hat.clone();
        Ok((
            y,
            Cache::LayerNorm(NormCache {
                x_hat,
                inv_std: Tensor::new(&[n], inv_std)?,
                batch_stats: true,
            }),
        ))
    }

    /// Forward map without a cache, for values passed across a block boundary.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.shape()[0];
        let f = x.len() / n;
        let fz = T::from_usize(f).unwrap();
        let eps = T::lit(self.eps);
        let mut y = x.clone();
        for row in y.data_mut().chunks_exact_mut(f) {
            let mean = row.iter().copied().sum::<T>() / fz;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / fz;
            let inv = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        y.ensure_finite("layernorm")?;
        Ok(y)
    }

    pub(super) fn backward<T: Real>(&self, cache: NormCache<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Grads<T>> {
        let NormCache { x_hat, inv_std, .. } = cache;
        if dy.shape() != x_hat.shape() {
            return Err(Error::ShapeMismatch {
                op: "layernorm_backward",
                expected: x_hat.shape().to_vec(),
                got: dy.shape().to_vec(),
            });
        }
        if !need_dx {
            return Ok(Grads {
                dx: None,
                params: vec![],
            });
        }
        let n = x_hat.shape()[0];
        let f = x_hat.len() / n;
        let fz = T::from_usize(f).unwrap();
        let mut dx = Tensor::zeros(x_hat.shape())?;
        for (((o, d), xh), &inv) in dx
            .data_mut()
            .chunks_exact_mut(f)
            .zip(dy.data().chunks_exact(f))
            .zip(x_hat.data().chunks_exact(f))
            .zip(inv_std.data())
        {
            let sd = d.iter().copied().sum::<T>();
            let sdx = d.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
            let k = inv / fz;
            for ((ov, &dv), &xv) in o.iter_mut().zip(d).zip(xh) {
                *ov = k * (fz * dv - sd - xv * sdx);
            }
        }
        Ok(Grads {
            dx: Some(dx),
            params: vec![],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;
    use crate::layers::{Ctx, Layer};
    use crate::rng::Rng;

    fn moments(v: &[f64]) -> (f64, f64) {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        (m, var)
    }

    #[test]
    fn batchnorm_train_normalizes_per_channel() {
        let mut rng = Rng::new(1);
        let mut bn = BatchNorm2d::<f64>::new(3).unwrap();
        let x = Tensor::from_fn(&[4, 3, 5, 5], |i| 3.0 + 2.0 * (i as f64 * 0.37).sin() + rng.normal())
            .unwrap();
        let (y, _) = bn.forward(x, Mode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 3 + ch) * 25..(n * 3 + ch + 1) * 25].to_vec())
                .collect();
            let (m, v) = moments(&vals);
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_rejects_single_sample_training() {
        let mut bn = BatchNorm2d::<f64>::new(2).unwrap();
        let x = Tensor::zeros(&[1, 2, 3, 3]).unwrap();
        assert!(matches!(bn.forward(x, Mode::Train), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_only() {
        let mut rng = Rng::new(2);
        let mut l = Layer::BatchNorm(BatchNorm2d::<f64>::new(2).unwrap());
        let x = Tensor::randn(&[3, 2, 4, 4], &mut rng).unwrap();
        l.forward(x.clone(), &mut Ctx::train(Exec::Sequential, Rng::new(0))).unwrap();
        let before = l.clone();
        let (a, _) = l.forward(x.clone(), &mut Ctx::eval(Exec::Sequential)).unwrap();
        let (b, _) = l.forward(x, &mut Ctx::eval(Exec::Sequential)).unwrap();
        assert_eq!(a, b);
        assert_eq!(l, before);
    }

    #[test]
    fn layernorm_per_sample_moments_and_constant_input() {
        let mut rng = Rng::new(3);
        let ln = LayerNorm::default();
        let x = Tensor::<f64>::from_fn(&[3, 2, 4, 4], |i| 5.0 + (i % 7) as f64 + rng.normal()).unwrap();
        let (y, _) = ln.forward(x).unwrap();
        for row in y.data().chunks_exact(32) {
            let (m, v) = moments(row);
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
        let c = Tensor::<f64>::full(&[2, 6], 4.2).unwrap();
        let (z, _) = ln.forward(c.clone()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(ln.apply(&c).unwrap(), z);
    }
}
