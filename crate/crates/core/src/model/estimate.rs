//! Analytic peak of tracked bytes during one training step.
//!
//! The walk replays, byte for byte, the allocation and release order of the
//! layer implementations and of the block-local and end-to-end training
//! steps, without touching any data.

use super::{BlockGraph, TrainMode};
use crate::error::Result;
use crate::layers::{Layer, Mode, PoolKind, Relu};
use crate::real::Real;

#[derive(Debug, Default)]
struct Sim {
    live: usize,
    peak: usize,
}

impl Sim {
    fn alloc(&mut self, bytes: usize) {
        self.live += bytes;
        self.peak = self.peak.max(self.live);
    }

    fn free(&mut self, bytes: usize) {
        self.live -= bytes;
    }
}

fn elems(shape: &[usize]) -> usize {
    shape.iter().product()
}

struct Walker {
    t: usize,
    sim: Sim,
}

impl Walker {
    fn bytes(&self, shape: &[usize]) -> usize {
        elems(shape) * self.t
    }

    /// Forward of one layer in training mode. On entry the input is live; on
    /// exit the cache and the output are.
    fn forward<T: Real>(&mut self, layer: &Layer<T>, input: &[usize]) -> Result<Vec<usize>> {
        let out = layer.output_shape(input)?;
        let (ib, ob) = (self.bytes(input), self.bytes(&out));
        match layer {
            Layer::Conv(_) | Layer::Relu(_) | Layer::Linear(_) => self.sim.alloc(ob),
            Layer::BatchNorm(_) => {
                self.sim.alloc(ob);
                self.sim.alloc(input[1] * self.t);
            }
            Layer::LayerNorm(_) => {
                self.sim.alloc(input[0] * self.t);
                self.sim.alloc(ob);
            }
            Layer::Pool(p) => match p.kind {
                PoolKind::Max => {
                    self.sim.free(ib);
                    self.sim.alloc(ob);
                    self.sim.alloc(elems(&out) * std::mem::size_of::<u32>());
                }
                PoolKind::Average => {
                    self.sim.alloc(ob);
                    self.sim.free(ib);
                }
            },
            Layer::Dropout(_) => {
                self.sim.alloc(ib);
                self.sim.alloc(ob);
                self.sim.free(ib);
            }
            Layer::Flatten => {}
            Layer::GlobalAvgPool => {
                self.sim.alloc(ob);
                self.sim.free(ib);
            }
            Layer::Residual(r) => {
                self.sim.alloc(ib);
                let skip = match &r.projection {
                    Some(p) => self.forward(p, input)?,
                    None => input.to_vec(),
                };
                let sb = self.bytes(&skip);
                let mut s = input.to_vec();
                for l in [&r.conv1, &r.bn1, &Layer::Relu(Relu), &r.conv2, &r.bn2] {
                    s = self.forward(l, &s)?;
                }
                self.sim.alloc(ob);
                self.sim.free(ob);
                self.sim.free(sb);
                self.sim.alloc(ob);
            }
        }
        Ok(out)
    }

    /// Backward of one layer. On entry the cache and the upstream gradient
    /// are live; on exit the cache is gone and the input gradient and the
    /// parameter gradients are live. The caller releases the upstream
    /// gradient.
    fn backward<T: Real>(&mut self, layer: &Layer<T>, input: &[usize], need_dx: bool) -> Result<()> {
        let out = layer.output_shape(input)?;
        let (ib, ob) = (self.bytes(input), self.bytes(&out));
        let dx = if need_dx { ib } else { 0 };
        let pb = layer.param_count() * self.t;
        match layer {
            Layer::Conv(_) | Layer::BatchNorm(_) | Layer::Linear(_) => {
                self.sim.alloc(dx);
                self.sim.alloc(pb);
                self.sim.free(layer.cache_bytes(input, Mode::Train)?);
            }
            Layer::Relu(_) | Layer::Dropout(_) | Layer::Pool(_) | Layer::LayerNorm(_) => {
                self.sim.alloc(dx);
                self.sim.free(layer.cache_bytes(input, Mode::Train)?);
            }
            Layer::Flatten | Layer::GlobalAvgPool => self.sim.alloc(dx),
            Layer::Residual(r) => {
                // output relu: d(sum), then its cache goes
                self.sim.alloc(ob);
                self.sim.free(ob);
                let relu = Layer::Relu(Relu);
                let main = [&r.conv1, &r.bn1, &relu, &r.conv2, &r.bn2];
                let mut shapes = vec![input.to_vec()];
                for l in &main[..4] {
                    let s = l.output_shape(shapes.last().unwrap())?;
                    shapes.push(s);
                }
                let mut g: Option<usize> = None;
                for i in (0..5).rev() {
                    let want = i > 0 || need_dx;
                    self.backward(main[i], &shapes[i], want)?;
                    if let Some(prev) = g.take() {
                        self.sim.free(prev);
                    }
                    g = want.then(|| self.bytes(&shapes[i]));
                }
                let dskip = match &r.projection {
                    Some(p) => {
                        self.backward(p, input, need_dx)?;
                        dx
                    }
                    None => {
                        self.sim.alloc(dx);
                        dx
                    }
                };
                if let Some(gb) = g {
                    self.sim.alloc(ib);
                    self.sim.free(gb);
                    self.sim.free(dskip);
                } else {
                    self.sim.free(dskip);
                }
                self.sim.free(ob);
            }
        }
        Ok(())
    }

    /// Backward through `layers`, releasing each upstream gradient after its
    /// layer. On entry `dy` is live; on exit the input gradient (if any) and
    /// all parameter gradients are.
    fn backward_chain<T: Real>(&mut self, layers: &[&Layer<T>], shapes: &[Vec<usize>], need_dx: bool) -> Result<usize> {
        let mut dy = self.bytes(&shapes[layers.len()]);
        for i in (0..layers.len()).rev() {
            let want = i > 0 || need_dx;
            self.backward(layers[i], &shapes[i], want)?;
            self.sim.free(dy);
            dy = if want { self.bytes(&shapes[i]) } else { 0 };
        }
        Ok(dy)
    }

    fn forward_chain<T: Real>(&mut self, layers: &[&Layer<T>], input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![input.to_vec()];
        for l in layers {
            let s = self.forward(*l, shapes.last().unwrap())?;
            shapes.push(s);
        }
        Ok(shapes)
    }
}

/// Peak tracked bytes of one training step at `batch` samples: parameters,
/// optimizer moments and buffers, plus every activation, cache and gradient
/// alive at the worst moment. End-to-end training holds the caches of the
/// whole graph at once; block-local training holds one block's at a time.
pub fn peak_activation_estimate<T: Real>(graph: &BlockGraph<T>, batch: usize) -> Result<usize> {
    let t = T::BYTES;
    let mut w = Walker { t, sim: Sim::default() };
    let params = graph.count_params();
    let buffers: usize = graph
        .blocks
        .iter()
        .flat_map(|b| b.layers.iter())
        .chain(graph.classifier.iter())
        .flat_map(|l| l.buffers())
        .map(|b| b.len())
        .sum();
    w.sim.alloc((3 * params + buffers) * t);

    let input = graph.input_shape(batch);
    w.sim.alloc(w.bytes(&input));
    let j = graph.classes();

    match graph.mode() {
        TrainMode::Bp => {
            let layers: Vec<&Layer<T>> = graph
                .blocks
                .iter()
                .flat_map(|b| b.layers.iter())
                .chain(graph.classifier.iter())
                .collect();
            let shapes = w.forward_chain(&layers, &input)?;
            let logits = w.bytes(shapes.last().unwrap());
            // loss: per-sample values, then the logit gradient; logits released
            w.sim.alloc(batch * t);
            w.sim.alloc(logits);
            w.sim.free(batch * t);
            w.sim.free(logits);
            w.backward_chain(&layers, &shapes, false)?;
            w.sim.free(params * t);
        }
        mode => {
            let last = graph.blocks.len().saturating_sub(1);
            let mut x = input;
            for (bi, block) in graph.blocks.iter().enumerate() {
                let layers: Vec<&Layer<T>> = block.layers.iter().collect();
                let shapes = w.forward_chain(&layers, &x)?;
                let y = shapes.last().unwrap().clone();
                let yb = w.bytes(&y);
                if !block.trainable {
                    for (l, s) in layers.iter().zip(&shapes) {
                        w.sim.free(l.cache_bytes(s, Mode::Train)?);
                    }
                    x = y;
                    continue;
                }
                let next = if bi < last { yb } else { 0 };
                let gm = batch * j * t;
                let mut head_params = 0;
                match (mode, &block.head) {
                    (TrainMode::Sff, Some(h)) => {
                        head_params = h.param_count() * t;
                        w.sim.alloc(next);
                        let zb = batch * j * y[2] * y[3] * t;
                        w.sim.alloc(zb);
                        w.sim.alloc(gm);
                        loss_events(&mut w.sim, batch * t, gm);
                        // head backward: d z, z released, conv backward, input released
                        w.sim.alloc(zb);
                        w.sim.free(zb);
                        w.sim.alloc(yb);
                        w.sim.alloc(head_params);
                        w.sim.free(yb);
                        w.sim.free(zb);
                        w.sim.free(gm);
                    }
                    _ => {
                        w.sim.alloc(next);
                        w.sim.alloc(gm);
                        loss_events(&mut w.sim, batch * t, gm);
                        w.sim.alloc(yb);
                        w.sim.free(gm);
                        w.sim.free(yb);
                    }
                }
                w.backward_chain(&layers, &shapes, false)?;
                let grads = block.layers.iter().map(|l| l.param_count()).sum::<usize>() * t + head_params;
                w.sim.free(grads);
                x = y;
            }
        }
    }
    Ok(w.sim.peak)
}

/// Softmax-margin loss on a goodness matrix: per-sample values and the
/// gradient are allocated, then the goodness and per-sample values go.
fn loss_events(sim: &mut Sim, per_sample: usize, gm: usize) {
    sim.alloc(per_sample);
    sim.alloc(gm);
    sim.free(gm);
    sim.free(per_sample);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GraphSpec, Preset};
    use crate::rng::Rng;

    #[test]
    fn local_never_exceeds_end_to_end() {
        let mut rng = Rng::new(0);
        for preset in [Preset::Cnn, Preset::Cnnb, Preset::TinyResnet] {
            for batch in [2, 16, 128] {
                let sff = GraphSpec::new(preset, TrainMode::Sff, 10, [3, 32, 32])
                    .unwrap()
                    .build::<f32>(&mut rng)
                    .unwrap();
                let bp = GraphSpec::new(preset, TrainMode::Bp, 10, [3, 32, 32])
                    .unwrap()
                    .build::<f32>(&mut rng)
                    .unwrap();
                let a = peak_activation_estimate(&sff, batch).unwrap();
                let b = peak_activation_estimate(&bp, batch).unwrap();
                assert!(a <= b, "{preset} batch {batch}: {a} > {b}");
            }
        }
    }

    #[test]
    fn scales_with_precision() {
        let mut rng = Rng::new(0);
        let spec = GraphSpec::new(Preset::Cnn, TrainMode::Sff, 10, [1, 16, 16]).unwrap();
        let a = peak_activation_estimate(&spec.build::<f32>(&mut rng).unwrap(), 8).unwrap();
        let b = peak_activation_estimate(&spec.build::<f64>(&mut rng).unwrap(), 8).unwrap();
        assert!(b > a && b <= 2 * a);
    }
}
