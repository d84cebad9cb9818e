//! Layer kinds with hand-written forward and backward passes.
//!
//! Every forward pass takes its input by value and keeps in its cache only
//! what the backward pass needs, so the live-tensor footprint of a forward
//! chain is exactly the sum of the caches plus the current activation.

mod activation;
mod conv;
mod linear;
mod norm;
mod pool;
mod residual;

pub use activation::{Dropout, Relu};
pub use conv::{conv_out_extent, Conv2d};
pub use linear::Linear;
pub use norm::{BatchNorm2d, LayerNorm, NormCache};
pub use pool::{Pool2d, PoolKind};
pub use residual::{Residual, ResidualCache};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::memory::Tracked;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-pass context: mode, execution policy and the dropout random source.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub mode: Mode,
    pub exec: Exec,
    pub rng: Rng,
}

impl Ctx {
    pub fn train(exec: Exec, rng: Rng) -> Self {
        Self {
            mode: Mode::Train,
            exec,
            rng,
        }
    }

    pub fn eval(exec: Exec) -> Self {
        Self {
            mode: Mode::Eval,
            exec,
            rng: Rng::new(0),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }
}

/// Kaiming-uniform (fan-in, ReLU gain) bound: `sqrt(6 / fan_in)`.
pub const INIT_SCHEME: &str = "kaiming-uniform-fan-in";

pub(crate) fn kaiming_uniform<T: Real>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu(Relu),
    Pool(Pool2d),
    Dropout(Dropout),
    LayerNorm(LayerNorm),
    Linear(Linear<T>),
    Flatten,
    GlobalAvgPool,
    Residual(Box<Residual<T>>),
}

#[derive(Debug)]
pub enum Cache<T> {
    Conv(Tensor<T>),
    BatchNorm(norm::NormCache<T>),
    Relu(Tensor<T>),
    MaxPool {
        argmax: Tracked<u32>,
        in_shape: Vec<usize>,
    },
    AvgPool {
        in_shape: Vec<usize>,
    },
    Dropout(Option<Tensor<T>>),
    LayerNorm(norm::NormCache<T>),
    Linear(Tensor<T>),
    Reshape {
        in_shape: Vec<usize>,
    },
    Residual(Box<residual::ResidualCache<T>>),
}

/// Result of a backward pass: input gradient (when requested) and parameter
/// gradients in [`Layer::params`] order.
#[derive(Debug)]
pub struct Grads<T> {
    pub dx: Option<Tensor<T>>,
    pub params: Vec<Tensor<T>>,
}

fn cache_mismatch(layer: &'static str) -> Error {
    Error::InvalidShape(format!("{layer}: backward called with a foreign cache"))
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm2d",
            Layer::Relu(_) => "relu",
            Layer::Pool(p) => match p.kind {
                PoolKind::Max => "maxpool2d",
                PoolKind::Average => "avgpool2d",
            },
            Layer::Dropout(_) => "dropout",
            Layer::LayerNorm(_) => "layernorm",
            Layer::Linear(_) => "linear",
            Layer::Flatten => "flatten",
            Layer::GlobalAvgPool => "global-avg-pool",
            Layer::Residual(_) => "residual",
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Cache<T>)> {
        match self {
            Layer::Conv(l) => l.forward(x, ctx.exec),
            Layer::BatchNorm(l) => l.forward(x, ctx.mode),
            Layer::Relu(l) => l.forward(x),
            Layer::Pool(l) => l.forward(x),
            Layer::Dropout(l) => l.forward(x, ctx),
            Layer::LayerNorm(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Flatten => {
                let in_shape = x.shape().to_vec();
                let n = in_shape[0];
                let rest = x.len() / n;
                Ok((x.reshape(&[n, rest])?, Cache::Reshape { in_shape }))
            }
            Layer::GlobalAvgPool => {
                x.dims4("global_avg_pool")?;
                let y = x.mean_over(&[2, 3])?;
                Ok((
                    y,
                    Cache::Reshape {
                        in_shape: x.shape().to_vec(),
                    },
                ))
            }
            Layer::Residual(l) => l.forward(x, ctx),
        }
    }

    pub fn backward(
        &self,
        cache: Cache<T>,
        dy: &Tensor<T>,
        need_dx: bool,
        exec: Exec,
    ) -> Result<Grads<T>> {
        match (self, cache) {
            (Layer::Conv(l), Cache::Conv(x)) => l.backward(x, dy, need_dx, exec),
            (Layer::BatchNorm(l), Cache::BatchNorm(c)) => l.backward(c, dy, need_dx),
            (Layer::Relu(l), Cache::Relu(x)) => l.backward(x, dy, need_dx),
            (Layer::Pool(l), c @ (Cache::MaxPool { .. } | Cache::AvgPool { .. })) => {
                l.backward(c, dy, need_dx)
            }
            (Layer::Dropout(l), Cache::Dropout(mask)) => l.backward(mask, dy, need_dx),
            (Layer::LayerNorm(l), Cache::LayerNorm(c)) => l.backward(c, dy, need_dx),
            (Layer::Linear(l), Cache::Linear(x)) => l.backward(x, dy, need_dx),
            (Layer::Flatten, Cache::Reshape { in_shape }) => Ok(Grads {
                dx: need_dx
                    .then(|| dy.clone().reshape(&in_shape))
                    .transpose()?,
                params: vec![],
            }),
            (Layer::GlobalAvgPool, Cache::Reshape { in_shape }) => Ok(Grads {
                dx: need_dx
                    .then(|| global_avg_pool_backward(dy, &in_shape))
                    .transpose()?,
                params: vec![],
            }),
            (Layer::Residual(l), Cache::Residual(c)) => l.backward(*c, dy, need_dx, exec),
            (l, _) => Err(cache_mismatch(l.kind())),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Residual(l) => l.params(),
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Residual(l) => l.params_mut(),
            _ => vec![],
        }
    }

    /// Non-trainable state that still belongs in a checkpoint.
    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::BatchNorm(l) => vec![&l.running_mean, &l.running_var],
            Layer::Residual(l) => l.buffers(),
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::BatchNorm(l) => vec![&mut l.running_mean, &mut l.running_var],
            Layer::Residual(l) => l.buffers_mut(),
            _ => vec![],
        }
    }

    /// Parameters followed by buffers, mutably.
    pub fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::BatchNorm(l) => vec![
                &mut l.gamma,
                &mut l.beta,
                &mut l.running_mean,
                &mut l.running_var,
            ],
            Layer::Residual(l) => l.state_mut(),
            other => other.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(l) => l.output_shape(input),
            Layer::BatchNorm(l) => l.check_input(input).map(|_| input.to_vec()),
            Layer::Relu(_) | Layer::Dropout(_) | Layer::LayerNorm(_) => Ok(input.to_vec()),
            Layer::Pool(l) => l.output_shape(input),
            Layer::Linear(l) => l.output_shape(input),
            Layer::Flatten => Ok(vec![input[0], input[1..].iter().product()]),
            Layer::GlobalAvgPool => match input {
                [n, c, _, _] => Ok(vec![*n, *c]),
                _ => Err(Error::ShapeMismatch {
                    op: "global_avg_pool",
                    expected: vec![0; 4],
                    got: input.to_vec(),
                }),
            },
            Layer::Residual(l) => l.output_shape(input),
        }
    }

    /// Bytes of tracked tensors the forward cache holds for an input of
    /// `input` shape in `mode`.
    pub fn cache_bytes(&self, input: &[usize], mode: Mode) -> Result<usize> {
        let elems: usize = input.iter().product();
        let t = T::BYTES;
        Ok(match self {
            Layer::Conv(_) | Layer::Relu(_) | Layer::Linear(_) => elems * t,
            Layer::BatchNorm(_) => (elems + input[1]) * t,
            Layer::LayerNorm(_) => (elems + input[0]) * t,
            Layer::Pool(p) => match p.kind {
                PoolKind::Max => {
                    self.output_shape(input)?.iter().product::<usize>() * std::mem::size_of::<u32>()
                }
                PoolKind::Average => 0,
            },
            Layer::Dropout(_) => match mode {
                Mode::Train => elems * t,
                Mode::Eval => 0,
            },
            Layer::Flatten | Layer::GlobalAvgPool => 0,
            Layer::Residual(l) => l.cache_bytes(input)?,
        })
    }

    /// Peak tracked bytes allocated transiently while running backward on
    /// this layer, over and above its cache and the incoming gradient.
    pub fn backward_transient_bytes(&self, input: &[usize], need_dx: bool) -> Result<usize> {
        let dx = if need_dx {
            input.iter().product::<usize>() * T::BYTES
        } else {
            0
        };
        Ok(match self {
            Layer::Residual(l) => l.backward_transient_bytes(input, need_dx)?,
            // reshape-style layers hand back a reshaped copy of dy
            _ => dx + self.param_count() * T::BYTES,
        })
    }
}

fn global_avg_pool_backward<T: Real>(dy: &Tensor<T>, in_shape: &[usize]) -> Result<Tensor<T>> {
    let [n, c, h, w] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3]];
    if dy.shape() != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            expected: vec![n, c],
            got: dy.shape().to_vec(),
        });
    }
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let hw = h * w;
    Tensor::from_fn(in_shape, |i| dy.data()[i / hw] * inv)
}
