use super::{kaiming_uniform, Cache, Grads};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Samples per partial weight-gradient sum. Fixed so that the reduction
/// order never depends on the thread count.
const GRAD_GROUP: usize = 8;

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// 2-D cross-correlation, weights `[out, in, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::InvalidShape("conv2d: kernel and stride must be positive".into()));
        }
        let fan_in = in_ch * kernel * kernel;
        Ok(Self {
            weight: kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng)?,
            bias: Tensor::zeros(&[out_ch])?,
            stride,
            padding,
        })
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let [o, _, _, _] = weight.dims4("conv2d")?;
        if bias.shape() != [o] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![o],
                got: bias.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidShape("conv2d: stride must be positive".into()));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    fn geometry(&self, input: &[usize]) -> Result<Geometry> {
        let [_, c, h, w] = match *input {
            [n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    expected: vec![0, self.in_channels(), 0, 0],
                    got: input.to_vec(),
                })
            }
        };
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![input[0], self.in_channels(), h, w],
                got: input.to_vec(),
            });
        }
        let (kh, kw) = self.kernel();
        let extents = (
            conv_out_extent(h, kh, self.stride, self.padding),
            conv_out_extent(w, kw, self.stride, self.padding),
        );
        let (Some(oh), Some(ow)) = extents else {
            return Err(Error::InvalidShape(format!(
                "conv2d: input {h}x{w} too small for kernel {kh}x{kw} with padding {}",
                self.padding
            )));
        };
        Ok(Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride: self.stride,
            padding: self.padding,
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let g = self.geometry(input)?;
        Ok(vec![input[0], self.out_channels(), g.oh, g.ow])
    }

    pub(crate) fn forward(&self, x: Tensor<T>, exec: Exec) -> Result<(Tensor<T>, Cache<T>)> {
        let y = self.apply(&x, exec)?;
        Ok((y, Cache::Conv(x)))
    }

    /// Forward map without keeping a cache.
    pub fn apply(&self, x: &Tensor<T>, exec: Exec) -> Result<Tensor<T>> {
        let g = self.geometry(x.shape())?;
        let n = x.shape()[0];
        let o = self.out_channels();
        let (k, p) = (g.k(), g.p());
        let sample_in = g.c * g.h * g.w;
        let mut y = Tensor::zeros(&[n, o, g.oh, g.ow])?;
        let w = self.weight.data();
        let b = self.bias.data();
        let xd = x.data();
        exec::for_each_chunk(exec, y.data_mut(), o * p, |i, yn| {
            let xn = &xd[i * sample_in..(i + 1) * sample_in];
            for (oc, row) in yn.chunks_exact_mut(p).enumerate() {
                row.fill(b[oc]);
            }
            if g.pointwise() {
                T::gemm(o, k, p, T::one(), w, (k, 1), xn, (p, 1), T::one(), yn, (p, 1));
            } else {
                let cols = im2col(xn, &g);
                T::gemm(o, k, p, T::one(), w, (k, 1), &cols, (p, 1), T::one(), yn, (p, 1));
            }
        });
        y.ensure_finite("conv2d")?;
        Ok(y)
    }

    pub(crate) fn backward(
        &self,
        x: Tensor<T>,
        dy: &Tensor<T>,
        need_dx: bool,
        exec: Exec,
    ) -> Result<Grads<T>> {
        let g = self.geometry(x.shape())?;
        let n = x.shape()[0];
        let o = self.out_channels();
        if dy.shape() != [n, o, g.oh, g.ow] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_backward",
                expected: vec![n, o, g.oh, g.ow],
                got: dy.shape().to_vec(),
            });
        }
        let (k, p) = (g.k(), g.p());
        let sample_in = g.c * g.h * g.w;
        let sample_out = o * p;
        let w = self.weight.data();
        let xd = x.data();
        let dyd = dy.data();

        let dx = if need_dx {
            let mut dx = Tensor::zeros(x.shape())?;
            exec::for_each_chunk(exec, dx.data_mut(), sample_in, |i, dxn| {
                let dyn_ = &dyd[i * sample_out..(i + 1) * sample_out];
                if g.pointwise() {
                    T::gemm(k, o, p, T::one(), w, (1, k), dyn_, (p, 1), T::zero(), dxn, (p, 1));
                } else {
                    let mut dcols = vec![T::zero(); k * p];
                    T::gemm(k, o, p, T::one(), w, (1, k), dyn_, (p, 1), T::zero(), &mut dcols, (p, 1));
                    col2im(&dcols, dxn, &g);
                }
            });
            Some(dx)
        } else {
            None
        };

        let groups = n.div_ceil(GRAD_GROUP);
        let partials = exec::map_indexed(exec, groups, |gi| {
            let mut dw = vec![T::zero(); o * k];
            let mut db = vec![T::zero(); o];
            for i in gi * GRAD_GROUP..((gi + 1) * GRAD_GROUP).min(n) {
                let xn = &xd[i * sample_in..(i + 1) * sample_in];
                let dyn_ = &dyd[i * sample_out..(i + 1) * sample_out];
                if g.pointwise() {
                    T::gemm(o, p, k, T::one(), dyn_, (p, 1), xn, (1, p), T::one(), &mut dw, (k, 1));
                } else {
                    let cols = im2col(xn, &g);
                    T::gemm(o, p, k, T::one(), dyn_, (p, 1), &cols, (1, p), T::one(), &mut dw, (k, 1));
                }
                for (oc, row) in dyn_.chunks_exact(p).enumerate() {
                    db[oc] += row.iter().copied().sum::<T>();
                }
            }
            (dw, db)
        });
        let mut dw = vec![T::zero(); o * k];
        let mut db = vec![T::zero(); o];
        for (pw, pb) in &partials {
            dw.iter_mut().zip(pw).for_each(|(a, &b)| *a += b);
            db.iter_mut().zip(pb).for_each(|(a, &b)| *a += b);
        }
        drop(partials);
        let dw = Tensor::new(self.weight.shape(), dw)?;
        let db = Tensor::new(&[o], db)?;
        dw.ensure_finite("conv2d_backward")?;
        Ok(Grads {
            dx,
            params: vec![dw, db],
        })
    }
}

/// Unfold one sample `[c, h, w]` into columns `[c*kh*kw, oh*ow]`.
fn im2col<T: Real>(x: &[T], g: &Geometry) -> Vec<T> {
    let p = g.p();
    let mut cols = vec![T::zero(); g.k() * p];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into one sample.
fn col2im<T: Real>(cols: &[T], dx: &mut [T], g: &Geometry) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
