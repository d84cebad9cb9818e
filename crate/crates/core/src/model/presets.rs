use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Block, BlockGraph, TrainMode};
use crate::error::{Error, Result};
use crate::goodness::GoodnessHead;
use crate::layers::{BatchNorm2d, Conv2d, Dropout, Layer, LayerNorm, Linear, Pool2d, Relu, Residual};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Cnn,
    Cnnb,
    TinyResnet,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Cnn => "cnn",
            Preset::Cnnb => "cnnb",
            Preset::TinyResnet => "tiny-resnet",
        }
    }

    pub fn default_widths(self) -> Vec<usize> {
        match self {
            Preset::Cnn | Preset::Cnnb => vec![32, 64, 128],
            Preset::TinyResnet => vec![16, 32, 64],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Preset::Cnn),
            "cnnb" => Ok(Preset::Cnnb),
            "tiny-resnet" => Ok(Preset::TinyResnet),
            _ => Err(Error::Config(format!("unknown preset {s:?} (cnn, cnnb, tiny-resnet)"))),
        }
    }
}

pub const DROPOUT_RATE: f64 = 0.5;

/// Everything needed to rebuild a graph's topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub preset: Preset,
    pub mode: TrainMode,
    pub classes: usize,
    /// `[channels, height, width]` of one sample.
    pub input: [usize; 3],
    pub head_kernel: usize,
    /// Effective block widths.
    pub widths: Vec<usize>,
    /// Widths before rounding for channel partitioning, when they changed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requested_widths: Option<Vec<usize>>,
}

impl GraphSpec {
    pub fn new(preset: Preset, mode: TrainMode, classes: usize, input: [usize; 3]) -> Result<Self> {
        Self::with_widths(preset, mode, classes, input, preset.default_widths())
    }

    pub fn with_widths(
        preset: Preset,
        mode: TrainMode,
        classes: usize,
        input: [usize; 3],
        widths: Vec<usize>,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::TooFewClasses(classes));
        }
        if widths.len() != 3 || widths.contains(&0) {
            return Err(Error::Config(format!("{preset} needs three positive widths, got {widths:?}")));
        }
        let mut spec = Self {
            preset,
            mode,
            classes,
            input,
            head_kernel: 1,
            widths: widths.clone(),
            requested_widths: None,
        };
        if mode == TrainMode::Cwc {
            let rounded: Vec<usize> = widths.iter().map(|w| w.div_ceil(classes) * classes).collect();
            if rounded != widths {
                log::info!(
                    "{preset}: widths {widths:?} rounded to {rounded:?} for {classes}-way channel groups"
                );
                spec.widths = rounded;
                spec.requested_widths = Some(widths);
            }
        }
        Ok(spec)
    }

    pub fn head_kernel(mut self, k: usize) -> Self {
        self.head_kernel = k;
        self
    }

    pub fn build<T: Real>(&self, rng: &mut Rng) -> Result<BlockGraph<T>> {
        let [c, h, w] = self.input;
        if c == 0 || h < 4 || w < 4 {
            return Err(Error::InvalidShape(format!("input {:?} too small for {}", self.input, self.preset)));
        }
        let ws = &self.widths;
        let (mut blocks, classifier) = match self.preset {
            Preset::Cnn | Preset::Cnnb => {
                let bn = self.preset == Preset::Cnnb;
                let mut blocks = Vec::with_capacity(3);
                let mut in_ch = c;
                for (i, &out) in ws.iter().enumerate() {
                    let mut layers = vec![Layer::Conv(Conv2d::new(in_ch, out, 3, 1, 1, rng)?)];
                    if bn {
                        layers.push(Layer::BatchNorm(BatchNorm2d::new(out)?));
                    }
                    layers.push(Layer::Relu(Relu));
                    if i < 2 {
                        layers.push(Layer::Pool(Pool2d::max(2, 2)?));
                    }
                    blocks.push(Block::new(layers));
                    in_ch = out;
                }
                let features = ws[2] * (h / 4) * (w / 4);
                let classifier = match self.mode {
                    TrainMode::Bp => vec![
                        Layer::Dropout(Dropout::new(DROPOUT_RATE)?),
                        Layer::Flatten,
                        Layer::Linear(Linear::new(features, self.classes, rng)?),
                    ],
                    _ => vec![],
                };
                (blocks, classifier)
            }
            Preset::TinyResnet => {
                let stem = Block::new(vec![
                    Layer::Conv(Conv2d::new(c, ws[0], 3, 1, 1, rng)?),
                    Layer::BatchNorm(BatchNorm2d::new(ws[0])?),
                    Layer::Relu(Relu),
                ]);
                let r1 = Block::new(vec![Layer::Residual(Box::new(Residual::new(ws[0], ws[1], 2, rng)?))]);
                let r2 = Block::new(vec![Layer::Residual(Box::new(Residual::new(ws[1], ws[2], 2, rng)?))]);
                let classifier = match self.mode {
                    TrainMode::Bp => vec![
                        Layer::GlobalAvgPool,
                        Layer::Linear(Linear::new(ws[2], self.classes, rng)?),
                    ],
                    _ => vec![],
                };
                (vec![stem, r1, r2], classifier)
            }
        };
        if self.mode.is_local() {
            for (i, b) in blocks.iter_mut().enumerate() {
                b.post_norm = Some(LayerNorm::default());
                if self.mode == TrainMode::Sff {
                    b.head = Some(GoodnessHead::new(ws[i], self.classes, self.head_kernel, rng)?);
                }
            }
        }
        let graph = BlockGraph {
            blocks,
            classifier,
            spec: self.clone(),
        };
        graph.shape_walk(1)?;
        Ok(graph)
    }
}

/// Three conv+ReLU blocks, the first two max-pooled; no batch norm.
pub fn preset_cnn<T: Real>(classes: usize, mode: TrainMode, input: [usize; 3], rng: &mut Rng) -> Result<BlockGraph<T>> {
    GraphSpec::new(Preset::Cnn, mode, classes, input)?.build(rng)
}

/// Three conv+BN+ReLU blocks, the first two max-pooled.
pub fn preset_cnnb<T: Real>(classes: usize, mode: TrainMode, input: [usize; 3], rng: &mut Rng) -> Result<BlockGraph<T>> {
    GraphSpec::new(Preset::Cnnb, mode, classes, input)?.build(rng)
}

/// Conv+BN+ReLU stem followed by two strided residual blocks.
pub fn preset_tiny_resnet<T: Real>(
    classes: usize,
    mode: TrainMode,
    input: [usize; 3],
    rng: &mut Rng,
) -> Result<BlockGraph<T>> {
    GraphSpec::new(Preset::TinyResnet, mode, classes, input)?.build(rng)
}
