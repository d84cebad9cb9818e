use super::{Cache, Grads};
use crate::error::{Error, Result};
use crate::memory::Tracked;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pool2d {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

impl Pool2d {
    pub fn new(kind: PoolKind, window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::InvalidShape("pool2d: window and stride must be positive".into()));
        }
        Ok(Self {
            kind,
            window,
            stride,
        })
    }

    pub fn max(window: usize, stride: usize) -> Result<Self> {
        Self::new(PoolKind::Max, window, stride)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, c, h, w] if h >= self.window && w >= self.window => Ok(vec![
                n,
                c,
                (h - self.window) / self.stride + 1,
                (w - self.window) / self.stride + 1,
            ]),
            _ => Err(Error::InvalidShape(format!(
                "pool2d: input {input:?} too small for window {}",
                self.window
            ))),
        }
    }

    pub(super) fn forward<T: Real>(&self, x: Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        let out_shape = self.output_shape(x.shape())?;
        let [n, c, h, w] = x.dims4("pool2d")?;
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let planes = n * c;
        let xd = x.data();
        let mut y = Vec::with_capacity(planes * oh * ow);
        match self.kind {
            PoolKind::Max => {
                let mut argmax = Vec::with_capacity(planes * oh * ow);
                for pl in 0..planes {
                    let base = pl * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + oy * self.stride * w + ox * self.stride;
                            for i in 0..self.window {
                                for j in 0..self.window {
                                    let idx = base + (oy * self.stride + i) * w + ox * self.stride + j;
                                    if xd[idx] > xd[best] {
                                        best = idx;
                                    }
                                }
                            }
                            y.push(xd[best]);
                            argmax.push(best as u32);
                        }
                    }
                }
                let in_shape = x.shape().to_vec();
                drop(x);
                Ok((
                    Tensor::new(&out_shape, y)?,
                    Cache::MaxPool {
                        argmax: Tracked::new(argmax),
                        in_shape,
                    },
                ))
            }
            PoolKind::Average => {
                let inv = T::one() / T::from_usize(self.window * self.window).unwrap();
                for pl in 0..planes {
                    let base = pl * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = T::zero();
                            for i in 0..self.window {
                                let row = base + (oy * self.stride + i) * w + ox * self.stride;
                                s += xd[row..row + self.window].iter().copied().sum::<T>();
                            }
                            y.push(s * inv);
                        }
                    }
                }
                Ok((
                    Tensor::new(&out_shape, y)?,
                    Cache::AvgPool {
                        in_shape: x.shape().to_vec(),
                    },
                ))
            }
        }
    }

    pub(super) fn backward<T: Real>(
        &self,
        cache: Cache<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Result<Grads<T>> {
        let in_shape = match &cache {
            Cache::MaxPool { in_shape, .. } | Cache::AvgPool { in_shape } => in_shape.clone(),
            _ => unreachable!("dispatched by Layer::backward"),
        };
        let out_shape = self.output_shape(&in_shape)?;
        if dy.shape() != out_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "pool2d_backward",
                expected: out_shape,
                got: dy.shape().to_vec(),
            });
        }
        if !need_dx {
            return Ok(Grads {
                dx: None,
                params: vec![],
            });
        }
        let mut dx = Tensor::zeros(&in_shape)?;
        let dxd = dx.data_mut();
        match cache {
            Cache::MaxPool { argmax, .. } => {
                for (&g, &idx) in dy.data().iter().zip(argmax.iter()) {
                    dxd[idx as usize] += g;
                }
            }
            _ => {
                let (h, w) = (in_shape[2], in_shape[3]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let inv = T::one() / T::from_usize(self.window * self.window).unwrap();
                for (pl, plane) in dy.data().chunks_exact(oh * ow).enumerate() {
                    let base = pl * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = plane[oy * ow + ox] * inv;
                            for i in 0..self.window {
                                let row = base + (oy * self.stride + i) * w + ox * self.stride;
                                dxd[row..row + self.window].iter_mut().for_each(|v| *v += g);
                            }
                        }
                    }
                }
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

    #[test]
    fn max_pool_routes_to_argmax() {
        let mut l = Layer::Pool(Pool2d::max(2, 2).unwrap());
        let x = Tensor::new(&[1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 8., 7.]).unwrap();
        let (y, cache) = l.forward(x, &mut Ctx::eval(Exec::Sequential)).unwrap();
        assert_eq!(y.data(), &[5.0f64, 8.0]);
        let dy = Tensor::new(&[1, 1, 1, 2], vec![10., 20.]).unwrap();
        let dx = l.backward(cache, &dy, true, Exec::Sequential).unwrap().dx.unwrap();
        assert_eq!(dx.data(), &[0., 10., 0., 0., 0., 0., 20., 0.]);
    }

    #[test]
    fn max_pool_conserves_gradient_mass_when_tiling() {
        let mut rng = Rng::new(9);
        let mut l = Layer::Pool(Pool2d::max(2, 2).unwrap());
        let x = Tensor::<f64>::randn(&[2, 3, 6, 8], &mut rng).unwrap();
        let (y, cache) = l.forward(x, &mut Ctx::eval(Exec::Sequential)).unwrap();
        let dy = Tensor::randn(y.shape(), &mut rng).unwrap();
        let dx = l.backward(cache, &dy, true, Exec::Sequential).unwrap().dx.unwrap();
        assert!((dx.sum() - dy.sum()).abs() < 1e-10);
    }

    #[test]
    fn average_pool() {
        let mut l = Layer::Pool(Pool2d::new(PoolKind::Average, 2, 2).unwrap());
        let x = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 6.]).unwrap();
        let (y, cache) = l.forward(x, &mut Ctx::eval(Exec::Sequential)).unwrap();
        assert_eq!(y.data(), &[3.0f64]);
        let dy = Tensor::new(&[1, 1, 1, 1], vec![4.]).unwrap();
        let dx = l.backward(cache, &dy, true, Exec::Sequential).unwrap().dx.unwrap();
        assert_eq!(dx.data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn too_small_input() {
        let p = Pool2d::max(3, 1).unwrap();
        assert!(p.output_shape(&[1, 1, 2, 5]).is_err());
    }
}
