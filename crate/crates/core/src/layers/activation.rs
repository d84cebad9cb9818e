use super::{Cache, Ctx, Grads};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Relu;

impl Relu {
    pub(super) fn forward<T: Real>(&self, x: Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let y = x.map("relu", |v| v.max(T::zero()))?;
        Ok((y, Cache::Relu(x)))
    }

    pub(super) fn backward<T: Real>(&self, x: Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Grads<T>> {
        if dy.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                op: "relu_backward",
                expected: x.shape().to_vec(),
                got: dy.shape().to_vec(),
            });
        }
        let dx = need_dx
            .then(|| {
                let data = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::new(x.shape(), data)
            })
            .transpose()?;
        Ok(Grads { dx, params: vec![] })
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)` in
/// training; evaluation is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        Ok(Self { rate })
    }

    pub(super) fn forward<T: Real>(&self, x: Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Cache<T>)> {
        if !ctx.is_train() {
            return Ok((x, Cache::Dropout(None)));
        }
        let scale = T::lit(1.0 / (1.0 - self.rate));
        let rate = self.rate;
        let mask = Tensor::from_fn(x.shape(), |_| {
            if ctx.rng.uniform() < rate {
                T::zero()
            } else {
                scale
            }
        })?;
        let y = x.mul(&mask)?;
        Ok((y, Cache::Dropout(Some(mask))))
    }

    pub(super) fn backward<T: Real>(
        &self,
        mask: Option<Tensor<T>>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Result<Grads<T>> {
        let dx = if !need_dx {
            None
        } else {
            Some(match mask {
                Some(m) => dy.mul(&m)?,
                None => dy.clone(),
            })
        };
        Ok(Grads { dx, params: vec![] })
    }
}
