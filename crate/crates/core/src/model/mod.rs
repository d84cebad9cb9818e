//! Block graphs: ordered blocks of layers with gradient flow confined to a
//! block, optional goodness heads, and an optional classifier tail.

mod estimate;
mod presets;

pub use estimate::peak_activation_estimate;
pub use presets::{preset_cnn, preset_cnnb, preset_tiny_resnet, GraphSpec, Preset};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::goodness::{goodness_cwc, GoodnessHead, GoodnessMatrix};
use crate::layers::{Cache, Ctx, Layer, LayerNorm};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Sff,
    Cwc,
    Bp,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Sff => "sff",
            TrainMode::Cwc => "cwc",
            TrainMode::Bp => "bp",
        }
    }

    /// Block-local modes detach and normalize between blocks.
    pub fn is_local(self) -> bool {
        self != TrainMode::Bp
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sff" => Ok(TrainMode::Sff),
            "cwc" => Ok(TrainMode::Cwc),
            "bp" => Ok(TrainMode::Bp),
            _ => Err(Error::Config(format!("unknown mode {s:?} (sff, cwc, bp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub layers: Vec<Layer<T>>,
    pub trainable: bool,
    pub head: Option<GoodnessHead<T>>,
    pub post_norm: Option<LayerNorm>,
}

impl<T: Real> Block<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self {
            layers,
            trainable: true,
            head: None,
            post_norm: None,
        }
    }

    /// Layer parameters followed by head parameters.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.layers.iter().flat_map(|l| l.params()).collect();
        if let Some(h) = &self.head {
            v.push(&h.conv.weight);
            v.push(&h.conv.bias);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        if let Some(h) = &mut self.head {
            v.push(&mut h.conv.weight);
            v.push(&mut h.conv.bias);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for l in &self.layers {
            s = l.output_shape(&s)?;
        }
        Ok(s)
    }

    /// Forward through the layers, keeping one cache per layer.
    pub fn forward(&mut self, x: Tensor<T>, ctx: &mut Ctx) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for l in &mut self.layers {
            let (y, c) = l.forward(h, ctx)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    /// Backward through the layers. Parameter gradients come back in
    /// [`Block::params`] order, without the head's.
    pub fn backward(
        &self,
        caches: Vec<Cache<T>>,
        dy: Tensor<T>,
        need_dx: bool,
        exec: Exec,
    ) -> Result<(Option<Tensor<T>>, Vec<Tensor<T>>)> {
        layers_backward(&self.layers, caches, dy, need_dx, exec)
    }
}

pub(crate) fn layers_backward<T: Real>(
    layers: &[Layer<T>],
    caches: Vec<Cache<T>>,
    dy: Tensor<T>,
    need_dx: bool,
    exec: Exec,
) -> Result<(Option<Tensor<T>>, Vec<Tensor<T>>)> {
    if caches.len() != layers.len() {
        return Err(Error::InvalidShape(format!(
            "{} caches for {} layers",
            caches.len(),
            layers.len()
        )));
    }
    let mut per_layer: Vec<Vec<Tensor<T>>> = Vec::with_capacity(layers.len());
    let mut g = Some(dy);
    for (i, (l, c)) in layers.iter().zip(caches).enumerate().rev() {
        let upstream = g.take().expect("gradient present below the first layer");
        let want = i > 0 || need_dx;
        let r = l.backward(c, &upstream, want, exec)?;
        drop(upstream);
        per_layer.push(r.params);
        g = r.dx;
    }
    per_layer.reverse();
    Ok((g, per_layer.into_iter().flatten().collect()))
}

/// Per-block result of a forward walk.
#[derive(Debug, Clone)]
pub struct BlockOutput<T> {
    /// Block output before the boundary normalization.
    pub output: Tensor<T>,
    pub goodness: Option<GoodnessMatrix<T>>,
}

#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub blocks: Vec<BlockOutput<T>>,
    pub logits: Option<Tensor<T>>,
}

/// Prediction scores without intermediate outputs.
#[derive(Debug, Clone)]
pub struct Scores<T> {
    pub goodness: Vec<GoodnessMatrix<T>>,
    pub logits: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGraph<T> {
    pub blocks: Vec<Block<T>>,
    /// Layers after the last block producing logits; empty unless BP.
    pub classifier: Vec<Layer<T>>,
    pub spec: GraphSpec,
}

impl<T: Real> BlockGraph<T> {
    pub fn mode(&self) -> TrainMode {
        self.spec.mode
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        let [c, h, w] = self.spec.input;
        vec![batch, c, h, w]
    }

    pub fn count_params(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum::<usize>()
            + self.classifier.iter().map(|l| l.param_count()).sum::<usize>()
    }

    pub fn classifier_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.classifier.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Check every boundary and return the shape entering each block, plus
    /// the final output shape.
    pub fn shape_walk(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape(batch)];
        for (i, b) in self.blocks.iter().enumerate() {
            let s = b.output_shape(shapes.last().unwrap()).map_err(|e| e.in_block(i))?;
            shapes.push(s);
        }
        let mut s = shapes.pop().unwrap();
        for l in &self.classifier {
            s = l.output_shape(&s)?;
        }
        shapes.push(s);
        Ok(shapes)
    }

    fn block_goodness(&self, b: usize, y: &Tensor<T>, exec: Exec) -> Result<Option<GoodnessMatrix<T>>> {
        let block = &self.blocks[b];
        if !block.trainable {
            return Ok(None);
        }
        let g = match (self.mode(), &block.head) {
            (TrainMode::Sff, Some(h)) => Some(h.forward(y.clone(), exec, b)?.0),
            (TrainMode::Cwc, _) => {
                let mut g = goodness_cwc(y, self.classes())?;
                g.source_block = b;
                Some(g)
            }
            _ => None,
        };
        Ok(g)
    }

    fn walk(&mut self, x: Tensor<T>, ctx: &mut Ctx, keep: bool) -> Result<(Forward<T>, Vec<GoodnessMatrix<T>>)> {
        let expect = self.input_shape(x.shape()[0]);
        if x.shape() != expect.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "forward_blockwise",
                expected: expect,
                got: x.shape().to_vec(),
            });
        }
        let mut outs = Vec::new();
        let mut goods = Vec::new();
        let mut h = x;
        for b in 0..self.blocks.len() {
            let (y, _) = self.blocks[b].forward(h, ctx).map_err(|e| e.in_block(b))?;
            let g = self.block_goodness(b, &y, ctx.exec).map_err(|e| e.in_block(b))?;
            h = match &self.blocks[b].post_norm {
                Some(ln) => ln.apply(&y)?,
                None => y.clone(),
            };
            if let Some(g) = &g {
                goods.push(g.clone());
            }
            if keep {
                outs.push(BlockOutput { output: y, goodness: g });
            }
        }
        let logits = if self.classifier.is_empty() {
            None
        } else {
            for l in &mut self.classifier {
                h = l.forward(h, ctx)?.0;
            }
            Some(h)
        };
        Ok((Forward { blocks: outs, logits }, goods))
    }

    /// Run every block in order. In block-local modes each block receives the
    /// normalized output of its predecessor as a plain value.
    pub fn forward_blockwise(&mut self, x: Tensor<T>, ctx: &mut Ctx) -> Result<Forward<T>> {
        Ok(self.walk(x, ctx, true)?.0)
    }

    /// Goodness of every trainable block (block-local modes) or logits (BP),
    /// in evaluation mode.
    pub fn scores(&mut self, x: Tensor<T>, exec: Exec) -> Result<Scores<T>> {
        let (f, goodness) = self.walk(x, &mut Ctx::eval(exec), false)?;
        Ok(Scores {
            goodness,
            logits: f.logits,
        })
    }

    /// `(name, tensor)` pairs for everything a checkpoint stores, in
    /// declaration order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        fn push_layers<'a, T: Real>(prefix: &str, layers: &'a [Layer<T>], v: &mut Vec<(String, &'a Tensor<T>)>) {
            for (li, l) in layers.iter().enumerate() {
                for (pi, p) in l.params().into_iter().enumerate() {
                    v.push((format!("{prefix}.l{li}.p{pi}"), p));
                }
                for (bi, p) in l.buffers().into_iter().enumerate() {
                    v.push((format!("{prefix}.l{li}.buf{bi}"), p));
                }
            }
        }
        let mut v = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            push_layers(&format!("b{b}"), &block.layers, &mut v);
            if let Some(h) = &block.head {
                v.push((format!("b{b}.head.weight"), &h.conv.weight));
                v.push((format!("b{b}.head.bias"), &h.conv.bias));
            }
        }
        push_layers("cls", &self.classifier, &mut v);
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        fn push_layers<'a, T: Real>(prefix: &str, layers: &'a mut [Layer<T>], v: &mut Vec<(String, &'a mut Tensor<T>)>) {
            for (li, l) in layers.iter_mut().enumerate() {
                let np = l.params().len();
                for (i, t) in l.state_mut().into_iter().enumerate() {
                    let name = if i < np {
                        format!("{prefix}.l{li}.p{i}")
                    } else {
                        format!("{prefix}.l{li}.buf{}", i - np)
                    };
                    v.push((name, t));
                }
            }
        }
        let mut v = Vec::new();
        for (b, block) in self.blocks.iter_mut().enumerate() {
            push_layers(&format!("b{b}"), &mut block.layers, &mut v);
            if let Some(h) = &mut block.head {
                v.push((format!("b{b}.head.weight"), &mut h.conv.weight));
                v.push((format!("b{b}.head.bias"), &mut h.conv.bias));
            }
        }
        push_layers("cls", &mut self.classifier, &mut v);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Conv2d, Relu};
    use crate::rng::Rng;

    #[test]
    fn mode_round_trip() {
        for m in [TrainMode::Sff, TrainMode::Cwc, TrainMode::Bp] {
            assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
        }
        assert!("ff".parse::<TrainMode>().is_err());
    }

    #[test]
    fn single_block_equals_layer_composition() {
        let mut rng = Rng::new(3);
        let mut g = preset_cnn::<f64>(2, TrainMode::Sff, [1, 8, 8], &mut rng).unwrap();
        g.blocks.truncate(1);
        let x = Tensor::randn(&[2, 1, 8, 8], &mut rng).unwrap();
        let f = g.forward_blockwise(x.clone(), &mut Ctx::eval(Exec::Sequential)).unwrap();
        let mut h = x;
        let mut layers = g.blocks[0].layers.clone();
        for l in &mut layers {
            h = l.forward(h, &mut Ctx::eval(Exec::Sequential)).unwrap().0;
        }
        assert_eq!(f.blocks.len(), 1);
        assert_eq!(f.blocks[0].output, h);
    }

    #[test]
    fn cnnb_goodness_shapes() {
        let mut rng = Rng::new(0);
        let mut g = preset_cnnb::<f32>(10, TrainMode::Sff, [3, 32, 32], &mut rng).unwrap();
        let x = Tensor::randn(&[1, 3, 32, 32], &mut rng).unwrap();
        let f = g.forward_blockwise(x, &mut Ctx::eval(Exec::Sequential)).unwrap();
        assert_eq!(f.blocks.len(), 3);
        for (i, b) in f.blocks.iter().enumerate() {
            let gm = b.goodness.as_ref().unwrap();
            assert_eq!(gm.values.shape(), &[1, 10]);
            assert_eq!(gm.source_block, i);
        }
        assert!(f.logits.is_none());
    }

    #[test]
    fn bp_graph_produces_logits_only() {
        let mut rng = Rng::new(0);
        let mut g = preset_cnnb::<f32>(10, TrainMode::Bp, [3, 32, 32], &mut rng).unwrap();
        let x = Tensor::randn(&[2, 3, 32, 32], &mut rng).unwrap();
        let f = g.forward_blockwise(x, &mut Ctx::eval(Exec::Sequential)).unwrap();
        assert!(f.blocks.iter().all(|b| b.goodness.is_none()));
        assert_eq!(f.logits.unwrap().shape(), &[2, 10]);
        assert!(g.blocks.iter().all(|b| b.post_norm.is_none() && b.head.is_none()));
    }

    #[test]
    fn boundary_mismatch_reports_block() {
        let mut rng = Rng::new(0);
        let mut g = preset_cnn::<f32>(2, TrainMode::Sff, [1, 8, 8], &mut rng).unwrap();
        g.blocks[1].layers[0] = Layer::Conv(Conv2d::new(5, 4, 3, 1, 1, &mut rng).unwrap());
        let err = g.shape_walk(1).unwrap_err();
        assert!(matches!(err, Error::Block { index: 1, .. }), "{err}");
        let x = Tensor::zeros(&[1, 1, 8, 8]).unwrap();
        assert!(g.forward_blockwise(x, &mut Ctx::eval(Exec::Sequential)).is_err());
    }

    #[test]
    fn zero_layer_graph_has_no_params() {
        let g = BlockGraph::<f32> {
            blocks: vec![Block::new(vec![])],
            classifier: vec![],
            spec: GraphSpec::new(Preset::Cnn, TrainMode::Sff, 2, [1, 4, 4]).unwrap(),
        };
        assert_eq!(g.count_params(), 0);
        let b = Block::<f32>::new(vec![Layer::Relu(Relu)]);
        assert_eq!(b.param_count(), 0);
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = Rng::new(5);
        let mut g = preset_tiny_resnet::<f32>(4, TrainMode::Sff, [3, 16, 16], &mut rng).unwrap();
        let x = Tensor::randn(&[3, 3, 16, 16], &mut rng).unwrap();
        let a = g.scores(x.clone(), Exec::Parallel).unwrap();
        let b = g.scores(x, Exec::Sequential).unwrap();
        for (ga, gb) in a.goodness.iter().zip(&b.goodness) {
            assert_eq!(ga.values, gb.values);
        }
    }

    #[test]
    fn named_tensors_agree() {
        let mut rng = Rng::new(1);
        for preset in [Preset::Cnn, Preset::Cnnb, Preset::TinyResnet] {
            for mode in [TrainMode::Sff, TrainMode::Bp] {
                let mut g = GraphSpec::new(preset, mode, 3, [3, 16, 16])
                    .unwrap()
                    .build::<f32>(&mut rng)
                    .unwrap();
                let a: Vec<(String, Vec<usize>)> = g
                    .named_tensors()
                    .into_iter()
                    .map(|(n, t)| (n, t.shape().to_vec()))
                    .collect();
                let b: Vec<(String, Vec<usize>)> = g
                    .named_tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (n, t.shape().to_vec()))
                    .collect();
                assert_eq!(a, b, "{preset:?} {mode:?}");
            }
        }
    }
}
