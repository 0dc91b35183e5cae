//! Network descriptions shared by the codec, inference, training and the
//! mixed-precision sampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vertical::VerticalStack;

/// Convolution geometry. Weights are laid out `[out, in, kh, kw]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || h + 2 * self.pad < self.kh || w + 2 * self.pad < self.kw {
            return Err(Error::validation(format!(
                "kernel {}x{} (pad {}, stride {}) does not fit a {h}x{w} input",
                self.kh, self.kw, self.pad, self.stride
            )));
        }
        Ok(((h + 2 * self.pad - self.kh) / self.stride + 1, (w + 2 * self.pad - self.kw) / self.stride + 1))
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }

    /// A fully connected layer as a 1x1 convolution over a 1x1 image.
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        ConvGeom { in_ch: in_features, out_ch: out_features, kh: 1, kw: 1, stride: 1, pad: 0 }
    }
}

/// Architecture entry used to build a network for training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out: usize, kernel: usize, stride: usize, pad: usize, quantized: bool },
    Linear { out: usize, quantized: bool },
    BatchNorm,
    Relu,
    MaxPool { size: usize },
    Flatten,
}

/// Named architectures: `mnist_small` (28x28x1) and `cifar_small` (32x32x3),
/// both with full-precision first and last layers.
pub fn preset(name: &str) -> Option<(SampleShape, Vec<LayerSpec>)> {
    let conv = |out, quantized| LayerSpec::Conv { out, kernel: 3, stride: 1, pad: 1, quantized };
    let block = |out, quantized| {
        vec![conv(out, quantized), LayerSpec::BatchNorm, LayerSpec::Relu, LayerSpec::MaxPool { size: 2 }]
    };
    match name {
        "mnist_small" => {
            let mut l = block(16, false);
            l.extend(block(32, true));
            l.extend(block(32, true));
            l.extend([LayerSpec::Flatten, LayerSpec::Linear { out: 10, quantized: false }]);
            Some(([1, 28, 28], l))
        }
        "cifar_small" => {
            let mut l = block(32, false);
            l.extend(block(64, true));
            l.extend(block(128, true));
            l.extend([
                LayerSpec::Flatten,
                LayerSpec::Linear { out: 256, quantized: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Linear { out: 10, quantized: false },
            ]);
            Some(([3, 32, 32], l))
        }
        _ => None,
    }
}

/// Activation shape of one sample: `[c, h, w]`, with dense features as `[f, 1, 1]`.
pub type SampleShape = [usize; 3];

/// Per-level batch-norm parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Full-precision convolution shared by every precision.
    Conv {
        geom: ConvGeom,
        weight: Vec<f32>,
    },
    /// Quantized convolution with per-level activation step sizes.
    QConv {
        geom: ConvGeom,
        stack: VerticalStack,
        act_steps: Vec<f32>,
    },
    /// Full-precision dense layer with bias.
    Linear {
        geom: ConvGeom,
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    QLinear {
        geom: ConvGeom,
        stack: VerticalStack,
        act_steps: Vec<f32>,
    },
    /// One parameter set per level `0..=n`.
    BatchNorm {
        sets: Vec<BnParams>,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
}

impl Layer {
    pub fn is_quantized(&self) -> bool {
        matches!(self, Layer::QConv { .. } | Layer::QLinear { .. })
    }

    pub fn stack(&self) -> Option<&VerticalStack> {
        match self {
            Layer::QConv { stack, .. } | Layer::QLinear { stack, .. } => Some(stack),
            _ => None,
        }
    }

    pub fn geom(&self) -> Option<&ConvGeom> {
        match self {
            Layer::Conv { geom, .. }
            | Layer::QConv { geom, .. }
            | Layer::Linear { geom, .. }
            | Layer::QLinear { geom, .. } => Some(geom),
            _ => None,
        }
    }
}

/// A trained vertical-layered network: one weight stack per quantized layer
/// plus everything needed to run any level `0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    pub basic_bits: u32,
    pub n: usize,
    pub compensation: bool,
    pub input: SampleShape,
    pub layers: Vec<Layer>,
}

/// Output shape of `layer` applied to `shape`.
pub fn propagate(layer: &Layer, shape: SampleShape) -> Result<SampleShape> {
    let [c, h, w] = shape;
    match layer {
        Layer::Conv { geom, .. } | Layer::QConv { geom, .. } => {
            if geom.in_ch != c {
                return Err(Error::validation(format!("conv expects {} channels, got {c}", geom.in_ch)));
            }
            let (oh, ow) = geom.out_hw(h, w)?;
            Ok([geom.out_ch, oh, ow])
        }
        Layer::Linear { geom, .. } | Layer::QLinear { geom, .. } => {
            if h != 1 || w != 1 || geom.in_ch != c {
                return Err(Error::validation(format!("dense layer expects {} features, got {c}x{h}x{w}", geom.in_ch)));
            }
            Ok([geom.out_ch, 1, 1])
        }
        Layer::BatchNorm { sets } => {
            if sets.iter().any(|s| s.channels() != c) {
                return Err(Error::validation(format!("batch norm does not match {c} channels")));
            }
            Ok(shape)
        }
        Layer::Relu => Ok(shape),
        Layer::MaxPool { size } => {
            if *size == 0 || h < *size || w < *size {
                return Err(Error::validation(format!("max pool {size} on {h}x{w}")));
            }
            Ok([c, h / size, w / size])
        }
        Layer::Flatten => Ok([c * h * w, 1, 1]),
    }
}

impl LayeredModel {
    pub fn quantized_layers(&self) -> impl Iterator<Item = (usize, &VerticalStack)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| l.stack().map(|s| (i, s)))
    }

    pub fn output_shape(&self) -> Result<SampleShape> {
        self.layers.iter().try_fold(self.input, |s, l| propagate(l, s))
    }

    pub fn num_classes(&self) -> Result<usize> {
        let [c, h, w] = self.output_shape()?;
        Ok(c * h * w)
    }

    /// Check weight lengths, stack depths, table sizes and shape flow.
    pub fn validate(&self) -> Result<()> {
        let levels = self.n + 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let ctx = |m: String| Error::validation(format!("layer {i}: {m}"));
            match layer {
                Layer::Conv { geom, weight } => {
                    if weight.len() != geom.weight_len() {
                        return Err(ctx(format!("{} weights for {:?}", weight.len(), geom)));
                    }
                }
                Layer::Linear { geom, weight, bias } => {
                    if weight.len() != geom.weight_len() || bias.len() != geom.out_ch {
                        return Err(ctx("dense weight/bias length mismatch".into()));
                    }
                }
                Layer::QConv { geom, stack, act_steps } | Layer::QLinear { geom, stack, act_steps } => {
                    if stack.len() != geom.weight_len() {
                        return Err(ctx(format!(
                            "stack holds {} weights, geometry needs {}",
                            stack.len(),
                            geom.weight_len()
                        )));
                    }
                    if stack.n() != self.n || stack.basic_bits() != self.basic_bits {
                        return Err(ctx(format!(
                            "stack depth {}/{} bits differs from model {}/{}",
                            stack.n(),
                            stack.basic_bits(),
                            self.n,
                            self.basic_bits
                        )));
                    }
                    if act_steps.len() != levels || act_steps.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                        return Err(ctx("activation steps must be n+1 positive values".into()));
                    }
                    if !(stack.top_step > 0.0 && stack.top_step.is_finite()) {
                        return Err(ctx("weight step must be positive".into()));
                    }
                }
                Layer::BatchNorm { sets } => {
                    if sets.len() != levels {
                        return Err(ctx(format!("{} batch-norm sets for {levels} levels", sets.len())));
                    }
                    for s in sets {
                        let c = s.channels();
                        if s.var.len() != c || s.scale.len() != c || s.shift.len() != c {
                            return Err(ctx("ragged batch-norm table".into()));
                        }
                        if s.var.iter().any(|&v| v < 0.0) {
                            return Err(ctx("negative variance".into()));
                        }
                    }
                }
                Layer::Relu | Layer::Flatten | Layer::MaxPool { .. } => {}
            }
        }
        self.output_shape().map(|_| ())
    }

    /// Number of stored batch-norm reals, counting each level's table.
    pub fn bn_parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::BatchNorm { sets } => sets.iter().map(|s| 4 * s.channels()).sum(),
                _ => 0,
            })
            .sum()
    }
}
