//! Dense row-major tensors with 1 to 4 axes, batch axis leading.

use crate::error::{Error, Result};
use crate::memory::Tracked;
use crate::real::Real;
use crate::rng::Rng;

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Tracked<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape(format!(
            "tensor rank must be 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                expected: vec![len],
                got: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Tracked::new(data),
        })
    }

    /// Panics on an invalid shape; for shapes computed internally.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Tracked::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![value; len]))
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), (0..len).map(&mut f).collect()))
    }

    pub fn randn(shape: &[usize], rng: &mut Rng) -> Result<Self> {
        Self::from_fn(shape, |_| T::lit(rng.normal()))
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        Self::from_fn(shape, |_| T::lit(rng.uniform_in(lo, hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data.into_vec()
    }

    pub fn nbytes(&self) -> usize {
        self.len() * T::BYTES
    }

    /// Extents of a 4-axis tensor, or a shape error naming `op`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::ShapeMismatch {
                op,
                expected: vec![0; 4],
                got: self.shape.clone(),
            }),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match *self.shape.as_slice() {
            [r, c] => Ok([r, c]),
            _ => Err(Error::ShapeMismatch {
                op,
                expected: vec![0; 2],
                got: self.shape.clone(),
            }),
        }
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        self.ensure_finite(op)?;
        Ok(self)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape).map_err(|_| Error::ExtentMismatch {
            from: self.shape.clone(),
            to: shape.to_vec(),
            from_len: self.len(),
            to_len: shape.iter().product(),
        })?;
        if len != self.len() {
            return Err(Error::ExtentMismatch {
                from: self.shape.clone(),
                to: shape.to_vec(),
                from_len: self.len(),
                to_len: len,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, op: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect()).checked(op)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_parts(self.shape.clone(), data).checked(op)
    }

    pub fn square(&self) -> Result<Self> {
        self.map("square", |v| v * v)
    }

    pub fn exp(&self) -> Result<Self> {
        self.map("exp", T::exp)
    }

    pub fn ln(&self) -> Result<Self> {
        self.map("log", T::ln)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn mul_scalar(&self, s: T) -> Result<Self> {
        self.map("mul_scalar", |v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let [m, k] = self.dims2("matmul")?;
        let [k2, n] = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: vec![k, n],
                got: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            (k, 1),
            &other.data,
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        Self::from_parts(vec![m, n], out).checked("matmul")
    }

    /// Arithmetic mean over `axes`; remaining axes keep their order. Reducing
    /// every axis leaves a single-element rank-1 tensor.
    pub fn mean_over(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut reduce = [false; MAX_RANK];
        for &a in axes {
            if a >= rank {
                return Err(Error::InvalidAxis {
                    op: "mean_over",
                    axis: a,
                    rank,
                });
            }
            reduce[a] = true;
        }
        let mut out_shape: Vec<usize> = (0..rank)
            .filter(|&a| !reduce[a])
            .map(|a| self.shape[a])
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let count: usize = (0..rank)
            .filter(|&a| reduce[a])
            .map(|a| self.shape[a])
            .product();

        // output stride contributed by each input axis (0 for reduced axes)
        let mut out_stride = [0usize; MAX_RANK];
        let mut s = 1;
        for a in (0..rank).rev() {
            if !reduce[a] {
                out_stride[a] = s;
                s *= self.shape[a];
            }
        }
        let mut acc = vec![T::zero(); out_shape.iter().product()];
        let mut idx = [0usize; MAX_RANK];
        for &v in self.data.iter() {
            let o: usize = (0..rank).map(|a| idx[a] * out_stride[a]).sum();
            acc[o] += v;
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < self.shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        let inv = T::one() / T::from_usize(count).unwrap();
        acc.iter_mut().for_each(|v| *v *= inv);
        Self::from_parts(out_shape, acc).checked("mean_over")
    }

    /// Per-row `log Σ_j exp(x_j)` of a 2-axis tensor, max-shifted.
    pub fn log_sum_exp_rows(&self) -> Result<Self> {
        let [rows, cols] = self.dims2("log_sum_exp")?;
        self.ensure_finite("log_sum_exp")?;
        let out = self
            .data
            .chunks_exact(cols)
            .map(log_sum_exp)
            .collect::<Vec<_>>();
        Self::from_parts(vec![rows], out).checked("log_sum_exp")
    }

    pub fn transpose2(&self) -> Result<Self> {
        let [r, c] = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Copy of samples `idx` along the leading axis.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let row = self.len() / self.shape[0];
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= self.shape[0] {
                return Err(Error::InvalidShape(format!(
                    "row {i} out of range for leading extent {}",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::new(&shape, data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        )
    }
}

/// Max-shifted log-sum-exp of one row.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}
