use super::{kaiming_uniform, Cache, Grads};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `y = x Wᵀ + b`, weights `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: kaiming_uniform(&[outputs, inputs], inputs, rng)?,
            bias: Tensor::zeros(&[outputs])?,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, f] if f == self.inputs() => Ok(vec![n, self.outputs()]),
            _ => Err(Error::ShapeMismatch {
                op: "linear",
                expected: vec![0, self.inputs()],
                got: input.to_vec(),
            }),
        }
    }

    pub(super) fn forward(&self, x: Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let out = self.output_shape(x.shape())?;
        let (n, i, o) = (out[0], self.inputs(), self.outputs());
        let mut y = Vec::with_capacity(n * o);
        for _ in 0..n {
            y.extend_from_slice(self.bias.data());
        }
        T::gemm(n, i, o, T::one(), x.data(), (i, 1), self.weight.data(), (1, i), T::one(), &mut y, (o, 1));
        let y = Tensor::new(&out, y)?;
        y.ensure_finite("linear")?;
        Ok((y, Cache::Linear(x)))
    }

    pub(super) fn backward(&self, x: Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Result<Grads<T>> {
        let out = self.output_shape(x.shape())?;
        if dy.shape() != out.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "linear_backward",
                expected: out,
                got: dy.shape().to_vec(),
            });
        }
        let (n, i, o) = (out[0], self.inputs(), self.outputs());
        let mut dw = vec![T::zero(); o * i];
        T::gemm(o, n, i, T::one(), dy.data(), (1, o), x.data(), (i, 1), T::zero(), &mut dw, (i, 1));
        let mut db = vec![T::zero(); o];
        for row in dy.data().chunks_exact(o) {
            db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        }
        let dx = need_dx
            .then(|| {
                let mut dx = vec![T::zero(); n * i];
                T::gemm(n, o, i, T::one(), dy.data(), (o, 1), self.weight.data(), (i, 1), T::zero(), &mut dx, (i, 1));
                Tensor::new(&[n, i], dx)
            })
            .transpose()?;
        Ok(Grads {
            dx,
            params: vec![Tensor::new(&[o, i], dw)?, Tensor::new(&[o], db)?],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;
    use crate::layers::{Ctx, Layer};

    #[test]
    fn forward_matches_hand_computation() {
        let l = Linear {
            weight: Tensor::new(&[2, 3], vec![1.0f64, 0.0, -1.0, 2.0, 1.0, 0.0]).unwrap(),
            bias: Tensor::new(&[2], vec![0.5, -0.5]).unwrap(),
        };
        let mut layer = Layer::Linear(l);
        let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (y, _) = layer.forward(x, &mut Ctx::eval(Exec::Sequential)).unwrap();
        assert_eq!(y.data(), &[1.0 - 3.0 + 0.5, 2.0 + 2.0 - 0.5]);
    }

    #[test]
    fn shape_mismatch() {
        let mut rng = Rng::new(0);
        let mut layer = Layer::Linear(Linear::<f64>::new(3, 2, &mut rng).unwrap());
        let x = Tensor::zeros(&[1, 4]).unwrap();
        assert!(layer.forward(x, &mut Ctx::eval(Exec::Sequential)).is_err());
    }
}
