//! Class-goodness matrices: the auxiliary-head route and the channel
//! partition route, plus the positive/negative split.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::layers::{Conv2d, Grads};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-block convolution from the block's `D` output channels to `J` class
/// channels. Its output feeds only the local loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GoodnessHead<T> {
    pub conv: Conv2d<T>,
    /// Square the head output before spatial pooling. Turning this off
    /// pools the raw head output instead.
    pub squared: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoodnessMatrix<T> {
    pub values: Tensor<T>,
    pub source_block: usize,
}

impl<T: Real> GoodnessMatrix<T> {
    pub fn classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn row(&self, n: usize) -> &[T] {
        let j = self.classes();
        &self.values.data()[n * j..(n + 1) * j]
    }
}

/// Everything the head backward pass needs.
#[derive(Debug)]
pub struct HeadCache<T> {
    input: Tensor<T>,
    z: Option<Tensor<T>>,
    spatial: usize,
}

impl<T: Real> GoodnessHead<T> {
    /// `k×k` head, `k` odd, padded to preserve spatial extents.
    pub fn new(channels: usize, classes: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "goodness head kernel must be odd to preserve extents, got {kernel}"
            )));
        }
        Ok(Self {
            conv: Conv2d::new(channels, classes, kernel, 1, (kernel - 1) / 2, rng)?,
            squared: true,
        })
    }

    pub fn classes(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn param_count(&self) -> usize {
        self.conv.weight.len() + self.conv.bias.len()
    }

    pub fn forward(&self, y: Tensor<T>, exec: Exec, block: usize) -> Result<(GoodnessMatrix<T>, HeadCache<T>)> {
        let [n, _, h, w] = y.dims4("goodness_sff")?;
        let z = self.conv.apply(&y, exec)?;
        let j = self.classes();
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let mut g = Vec::with_capacity(n * j);
        for plane in z.data().chunks_exact(hw) {
            let s: T = if self.squared {
                plane.iter().map(|&v| v * v).sum()
            } else {
                plane.iter().copied().sum()
            };
            g.push(s * inv);
        }
        let values = Tensor::new(&[n, j], g)?;
        values.ensure_finite("goodness_sff")?;
        Ok((
            GoodnessMatrix {
                values,
                source_block: block,
            },
            HeadCache {
                input: y,
                z: self.squared.then_some(z),
                spatial: hw,
            },
        ))
    }

    /// Gradients w.r.t. the block output and the head parameters.
    pub fn backward(&self, cache: HeadCache<T>, dg: &Tensor<T>, exec: Exec) -> Result<Grads<T>> {
        let HeadCache { input, z, spatial } = cache;
        let inv = T::one() / T::from_usize(spatial).unwrap();
        let [n, _, h, w] = input.dims4("goodness_sff_backward")?;
        let j = self.classes();
        if dg.shape() != [n, j] {
            return Err(Error::ShapeMismatch {
                op: "goodness_sff_backward",
                expected: vec![n, j],
                got: dg.shape().to_vec(),
            });
        }
        let dz = match z {
            Some(z) => {
                let two = T::lit(2.0) * inv;
                Tensor::from_fn(z.shape(), |i| two * z.data()[i] * dg.data()[i / spatial])?
            }
            None => Tensor::from_fn(&[n, j, h, w], |i| inv * dg.data()[i / spatial])?,
        };
        self.conv.backward(input, &dz, true, exec)
    }
}

/// Goodness from the block output through the head (no cache).
pub fn goodness_sff<T: Real>(y: &Tensor<T>, head: &GoodnessHead<T>, exec: Exec) -> Result<GoodnessMatrix<T>> {
    Ok(head.forward(y.clone(), exec, 0)?.0)
}

/// Channel-partition goodness: mean of squares over each class's `C/J`
/// channel group and all spatial positions.
pub fn goodness_cwc<T: Real>(y: &Tensor<T>, classes: usize) -> Result<GoodnessMatrix<T>> {
    let [n, c, h, w] = y.dims4("goodness_cwc")?;
    if classes == 0 || c % classes != 0 {
        return Err(Error::Indivisible { channels: c, classes });
    }
    let group = (c / classes) * h * w;
    let inv = T::one() / T::from_usize(group).unwrap();
    let g: Vec<T> = y
        .data()
        .chunks_exact(group)
        .map(|chunk| chunk.iter().map(|&v| v * v).sum::<T>() * inv)
        .collect();
    let values = Tensor::new(&[n, classes], g)?;
    values.ensure_finite("goodness_cwc")?;
    Ok(GoodnessMatrix {
        values,
        source_block: 0,
    })
}

pub fn goodness_cwc_backward<T: Real>(y: &Tensor<T>, dg: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = y.dims4("goodness_cwc_backward")?;
    let j = dg.shape()[1];
    if dg.shape() != [n, j] || c % j != 0 {
        return Err(Error::ShapeMismatch {
            op: "goodness_cwc_backward",
            expected: vec![n, j],
            got: dg.shape().to_vec(),
        });
    }
    let group = (c / j) * h * w;
    let two = T::lit(2.0) / T::from_usize(group).unwrap();
    Tensor::from_fn(y.shape(), |i| two * y.data()[i] * dg.data()[i / group])
}

/// Positive goodness `G[n, label]` and the mean goodness of the other classes.
pub fn split_pos_neg<T: Real>(g: &GoodnessMatrix<T>, labels: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let j = g.classes();
    if j < 2 {
        return Err(Error::TooFewClasses(j));
    }
    if labels.len() != g.rows() {
        return Err(Error::ShapeMismatch {
            op: "split_pos_neg",
            expected: vec![g.rows()],
            got: vec![labels.len()],
        });
    }
    let others = T::from_usize(j - 1).unwrap();
    let mut pos = Vec::with_capacity(labels.len());
    let mut neg = Vec::with_capacity(labels.len());
    for (n, &label) in labels.iter().enumerate() {
        if label >= j {
            return Err(Error::LabelOutOfRange { label, classes: j });
        }
        let row = g.row(n);
        let total: T = row.iter().copied().sum();
        pos.push(row[label]);
        neg.push((total - row[label]) / others);
    }
    Ok((Tensor::new(&[labels.len()], pos)?, Tensor::new(&[labels.len()], neg)?))
}
