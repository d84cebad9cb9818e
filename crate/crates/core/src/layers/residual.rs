use super::{BatchNorm2d, Cache, Conv2d, Ctx, Grads, Layer, Mode, Relu};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + skip(x))`, where `skip` is the
/// identity or a strided 1×1 projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual<T> {
    pub conv1: Layer<T>,
    pub bn1: Layer<T>,
    relu: Layer<T>,
    pub conv2: Layer<T>,
    pub bn2: Layer<T>,
    pub projection: Option<Layer<T>>,
}

#[derive(Debug)]
pub struct ResidualCache<T> {
    main: Vec<Cache<T>>,
    projection: Option<Cache<T>>,
    out_relu: Cache<T>,
}

impl<T: Real> Residual<T> {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Result<Self> {
        let projection = (stride != 1 || in_ch != out_ch)
            .then(|| Conv2d::new(in_ch, out_ch, 1, stride, 0, rng).map(Layer::Conv))
            .transpose()?;
        Ok(Self {
            conv1: Layer::Conv(Conv2d::new(in_ch, out_ch, 3, stride, 1, rng)?),
            bn1: Layer::BatchNorm(BatchNorm2d::new(out_ch)?),
            relu: Layer::Relu(Relu),
            conv2: Layer::Conv(Conv2d::new(out_ch, out_ch, 3, 1, 1, rng)?),
            bn2: Layer::BatchNorm(BatchNorm2d::new(out_ch)?),
            projection,
        })
    }

    fn main_path(&self) -> [&Layer<T>; 5] {
        [&self.conv1, &self.bn1, &self.relu, &self.conv2, &self.bn2]
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for l in [&self.conv1, &self.bn1, &self.conv2, &self.bn2] {
            v.extend(l.params());
        }
        if let Some(p) = &self.projection {
            v.extend(p.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for l in [&mut self.conv1, &mut self.bn1, &mut self.conv2, &mut self.bn2] {
            v.extend(l.params_mut());
        }
        if let Some(p) = &mut self.projection {
            v.extend(p.params_mut());
        }
        v
    }

    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        let mut v = self.bn1.buffers();
        v.extend(self.bn2.buffers());
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.bn1.buffers_mut();
        v.extend(self.bn2.buffers_mut());
        v
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for l in [&mut self.conv1, &mut self.bn1, &mut self.conv2, &mut self.bn2] {
            match l {
                Layer::BatchNorm(bn) => {
                    params.push(&mut bn.gamma);
                    params.push(&mut bn.beta);
                    buffers.push(&mut bn.running_mean);
                    buffers.push(&mut bn.running_var);
                }
                other => params.extend(other.params_mut()),
            }
        }
        if let Some(p) = &mut self.projection {
            params.extend(p.params_mut());
        }
        params.extend(buffers);
        params
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for l in self.main_path() {
            s = l.output_shape(&s)?;
        }
        let skip = match &self.projection {
            Some(p) => p.output_shape(input)?,
            None => input.to_vec(),
        };
        if skip != s {
            return Err(Error::ShapeMismatch {
                op: "residual",
                expected: s,
                got: skip,
            });
        }
        Ok(s)
    }

    pub(super) fn cache_bytes(&self, input: &[usize]) -> Result<usize> {
        let mut total = 0;
        let mut s = input.to_vec();
        for l in self.main_path() {
            total += l.cache_bytes(&s, Mode::Train)?;
            s = l.output_shape(&s)?;
        }
        if let Some(p) = &self.projection {
            total += p.cache_bytes(input, Mode::Train)?;
        }
        // output relu keeps the pre-activation sum
        Ok(total + s.iter().product::<usize>() * T::BYTES)
    }

    /// Tracked bytes live during backward beyond the cache and incoming
    /// gradient: the running gradient through the main path, the skip
    /// gradient, and the parameter gradients accumulated so far.
    pub(super) fn backward_transient_bytes(&self, input: &[usize], need_dx: bool) -> Result<usize> {
        let t = T::BYTES;
        let in_elems: usize = input.iter().product();
        let out = self.output_shape(input)?;
        let out_elems: usize = out.iter().product();
        let mid = self.conv1.output_shape(input)?;
        let mid_elems: usize = mid.iter().product();
        let all_params = self.params().iter().map(|p| p.len()).sum::<usize>() * t;
        // d(sum) stays alive until the skip branch is done; the deepest point of
        // the main path holds two mid-sized gradients at once
        let main = out_elems * t + 2 * mid_elems * t;
        let tail = if need_dx { 2 * in_elems * t } else { 0 };
        Ok(main.max(tail + out_elems * t) + all_params)
    }

    pub(super) fn forward(&mut self, x: Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Cache<T>)> {
        let (skip, projection) = match &mut self.projection {
            Some(p) => {
                let (s, c) = p.forward(x.clone(), ctx)?;
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let mut main = Vec::with_capacity(5);
        let mut h = x;
        for l in [
            &mut self.conv1,
            &mut self.bn1,
            &mut self.relu,
            &mut self.conv2,
            &mut self.bn2,
        ] {
            let (y, c) = l.forward(h, ctx)?;
            main.push(c);
            h = y;
        }
        let sum = h.add(&skip)?;
        drop(h);
        drop(skip);
        let (out, out_relu) = Layer::Relu(Relu).forward(sum, ctx)?;
        Ok((
            out,
            Cache::Residual(Box::new(ResidualCache {
                main,
                projection,
                out_relu,
            })),
        ))
    }

    pub(super) fn backward(
        &self,
        cache: ResidualCache<T>,
        dy: &Tensor<T>,
        need_dx: bool,
        exec: Exec,
    ) -> Result<Grads<T>> {
        let ResidualCache {
            main,
            projection,
            out_relu,
        } = cache;
        let dsum = Layer::Relu(Relu)
            .backward(out_relu, dy, true, exec)?
            .dx
            .expect("requested");

        let layers = self.main_path();
        let mut main_grads: Vec<Vec<Tensor<T>>> = Vec::with_capacity(5);
        let mut g: Option<Tensor<T>> = None;
        for (i, (l, c)) in layers.iter().zip(main).enumerate().rev() {
            let upstream = g.as_ref().unwrap_or(&dsum);
            let want = i > 0 || need_dx;
            let r = l.backward(c, upstream, want, exec)?;
            main_grads.push(r.params);
            g = r.dx;
        }
        main_grads.reverse();

        let (dskip, proj_grads) = match (&self.projection, projection) {
            (Some(p), Some(c)) => {
                let r = p.backward(c, &dsum, need_dx, exec)?;
                (r.dx, r.params)
            }
            (None, None) => (need_dx.then(|| dsum.clone()), vec![]),
            _ => return Err(super::cache_mismatch("residual")),
        };
        let dx = match (g, dskip) {
            (Some(a), Some(b)) => Some(a.add(&b)?),
            _ => None,
        };
        let mut params: Vec<Tensor<T>> = main_grads.into_iter().flatten().collect();
        params.extend(proj_grads);
        Ok(Grads { dx, params })
    }
}
