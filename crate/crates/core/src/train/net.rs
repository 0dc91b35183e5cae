//! Trainable network: full-precision source parameters from which every
//! level's quantized forward is derived.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BnParams, ConvGeom, Layer, LayerSpec, LayeredModel, SampleShape};
use crate::quant::{quant_range, quantize_scalar, QTensor, QuantParams};
use crate::train::tape::{NodeId, QConvSpec, QSource, RunningStats, Tape};
use crate::train::{ste, BnMode};
use crate::vertical::{compensation, decompose};

pub use crate::train::tape::ParamId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    WeightStep,
    ActStep,
    BnScale,
    BnShift,
    Carrier,
}

/// Whether a parameter's update combines the per-level gradients with the
/// objective weights or sums each level's own gradient unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Shared,
    Level,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub kind: ParamKind,
    pub group: ParamGroup,
    pub data: Vec<f64>,
    pub frozen: bool,
}

/// Level-`i` weights built from frozen lower levels plus a learned bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarrierSlot {
    pub base: Vec<i32>,
    pub carrier: ParamId,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSlots {
    pub step: ParamId,
    pub act_steps: Vec<ParamId>,
    pub carrier: Option<CarrierSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NetLayer {
    Conv { geom: ConvGeom, dense: bool, weight: ParamId, bias: Option<ParamId>, quant: Option<QuantSlots> },
    BatchNorm { channels: usize, scale: Vec<ParamId>, shift: Vec<ParamId>, stats: Vec<usize> },
    Relu,
    MaxPool { size: usize },
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Quantized layers run as plain convolutions on their source weights;
    /// batch norm uses set 0.
    Full,
    Level(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub basic_bits: u32,
    pub n: usize,
    pub compensation: bool,
    pub grad_scale: bool,
    pub input: SampleShape,
    pub bn_mode: BnMode,
    pub layers: Vec<NetLayer>,
    pub params: Vec<ParamTensor>,
    pub stats: Vec<RunningStats>,
}

impl Network {
    /// Build from an architecture description with He-normal weights.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        spec: &[LayerSpec],
        input: SampleShape,
        basic_bits: u32,
        n: usize,
        compensation: bool,
        bn_mode: BnMode,
        seed: u64,
    ) -> Result<Self> {
        if basic_bits < 2 {
            return Err(Error::Config("basic layer needs at least 2 bits".into()));
        }
        quant_range(basic_bits + n as u32, true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network {
            basic_bits,
            n,
            compensation,
            grad_scale: true,
            input,
            bn_mode,
            layers: Vec::new(),
            params: Vec::new(),
            stats: Vec::new(),
        };
        let levels = n + 1;
        let [mut c, mut h, mut w] = input;
        for (li, s) in spec.iter().enumerate() {
            let layer = match *s {
                LayerSpec::Conv { out, kernel, stride, pad, quantized } => {
                    let geom = ConvGeom { in_ch: c, out_ch: out, kh: kernel, kw: kernel, stride, pad };
                    (h, w) = geom.out_hw(h, w).map_err(|e| Error::Config(format!("layer {li}: {e}")))?;
                    c = out;
                    net.weighted(li, geom, false, quantized, &mut rng)?
                }
                LayerSpec::Linear { out, quantized } => {
                    if h != 1 || w != 1 {
                        return Err(Error::Config(format!("layer {li}: linear layer needs a flatten before it")));
                    }
                    let geom = ConvGeom::dense(c, out);
                    c = out;
                    net.weighted(li, geom, true, quantized, &mut rng)?
                }
                LayerSpec::BatchNorm => {
                    let (affine, stats) = match bn_mode {
                        BnMode::Shared => (1, 1),
                        BnMode::Stats => (1, levels),
                        BnMode::Full => (levels, levels),
                    };
                    let scale = (0..affine)
                        .map(|l| net.param(format!("{li}.bn{l}.scale"), ParamKind::BnScale, vec![1.0; c]))
                        .collect();
                    let shift = (0..affine)
                        .map(|l| net.param(format!("{li}.bn{l}.shift"), ParamKind::BnShift, vec![0.0; c]))
                        .collect();
                    let stats = (0..stats)
                        .map(|_| {
                            net.stats.push(RunningStats::new(c));
                            net.stats.len() - 1
                        })
                        .collect();
                    NetLayer::BatchNorm { channels: c, scale, shift, stats }
                }
                LayerSpec::Relu => NetLayer::Relu,
                LayerSpec::MaxPool { size } => {
                    if size == 0 || h < size || w < size {
                        return Err(Error::Config(format!("layer {li}: max pool {size} on {h}x{w}")));
                    }
                    h /= size;
                    w /= size;
                    NetLayer::MaxPool { size }
                }
                LayerSpec::Flatten => {
                    c *= h * w;
                    h = 1;
                    w = 1;
                    NetLayer::Flatten
                }
            };
            net.layers.push(layer);
        }
        Ok(net)
    }

    pub(crate) fn param(&mut self, name: String, kind: ParamKind, data: Vec<f64>) -> ParamId {
        let group = match kind {
            ParamKind::Weight | ParamKind::Bias | ParamKind::WeightStep => ParamGroup::Shared,
            _ => ParamGroup::Level,
        };
        self.params.push(ParamTensor { name, kind, group, data, frozen: false });
        self.params.len() - 1
    }

    fn weighted(
        &mut self,
        li: usize,
        geom: ConvGeom,
        dense: bool,
        quantized: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NetLayer> {
        let fan_in = (geom.in_ch * geom.kh * geom.kw).max(1);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        let wdata = (0..geom.weight_len()).map(|_| normal.sample(rng)).collect();
        let weight = self.param(format!("{li}.weight"), ParamKind::Weight, wdata);
        let (bias, quant) = if quantized {
            let step = self.param(format!("{li}.step"), ParamKind::WeightStep, vec![1.0]);
            let act_steps =
                (0..=self.n).map(|l| self.param(format!("{li}.act{l}.step"), ParamKind::ActStep, vec![1.0])).collect();
            (None, Some(QuantSlots { step, act_steps, carrier: None }))
        } else if dense {
            (Some(self.param(format!("{li}.bias"), ParamKind::Bias, vec![0.0; geom.out_ch])), None)
        } else {
            (None, None)
        };
        Ok(NetLayer::Conv { geom, dense, weight, bias, quant })
    }

    pub fn levels(&self) -> usize {
        self.n + 1
    }

    pub fn quantized_layers(&self) -> impl Iterator<Item = (usize, &ConvGeom, ParamId, &QuantSlots)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            NetLayer::Conv { geom, weight, quant: Some(q), .. } => Some((i, geom, *weight, q)),
            _ => None,
        })
    }

    /// Number of leading layers whose output is the same at every level.
    pub fn shared_prefix(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, NetLayer::BatchNorm { .. } | NetLayer::Conv { quant: Some(_), .. }))
            .unwrap_or(self.layers.len())
    }

    /// Batch-norm reals stored by the current mode, counting distinct tables.
    pub fn bn_parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                NetLayer::BatchNorm { channels, scale, shift, stats } => {
                    (scale.len() + shift.len() + 2 * stats.len()) * channels
                }
                _ => 0,
            })
            .sum()
    }

    pub fn classes(&self) -> usize {
        let mut c = self.input[0] * self.input[1] * self.input[2];
        let [mut ch, mut h, mut w] = self.input;
        for l in &self.layers {
            match l {
                NetLayer::Conv { geom, .. } => {
                    (h, w) = geom.out_hw(h, w).unwrap_or((0, 0));
                    ch = geom.out_ch;
                }
                NetLayer::MaxPool { size } => {
                    h /= size;
                    w /= size;
                }
                NetLayer::Flatten => {
                    ch *= h * w;
                    h = 1;
                    w = 1;
                }
                _ => {}
            }
            c = ch * h * w;
        }
        c
    }

    /// Level-`i` integer weights, their step and the compensation for a
    /// quantized layer.
    pub fn level_weights(&self, weight: ParamId, q: &QuantSlots, level: usize) -> (Vec<i32>, f64, f64) {
        if let Some(c) = &q.carrier {
            let r = &self.params[c.carrier].data;
            let w = c.base.iter().zip(r).map(|(&b, &r)| 2 * b + (r >= 0.0) as i32).collect();
            return (w, c.step, 0.0);
        }
        let top_bits = self.basic_bits + self.n as u32;
        let (qn, qp) = quant_range(top_bits, true).expect("validated at build");
        let s_n = self.params[q.step].data[0];
        let shift = self.n - level;
        let w = self.params[weight].data.iter().map(|&v| quantize_scalar(v, s_n, qn, qp) >> shift).collect();
        let z = if self.compensation { compensation(level, self.n).expect("level <= n") } else { 0.0 };
        (w, s_n * (1u64 << shift) as f64, z)
    }

    fn qconv_spec(&self, geom: &ConvGeom, weight: ParamId, q: &QuantSlots, level: usize, in_count: usize) -> QConvSpec {
        let (w_bar, s_i, z) = self.level_weights(weight, q, level);
        let bits = self.basic_bits + level as u32;
        let level_range = quant_range(bits, true).expect("validated at build");
        let act_qp = quant_range(bits, false).expect("validated at build").1;
        let top_range = quant_range(self.basic_bits + self.n as u32, true).expect("validated at build");
        let scale = |count, qp| if self.grad_scale { ste::grad_scale(count, qp) } else { 1.0 };
        let source = match &q.carrier {
            Some(c) => QSource::Carrier { carrier: c.carrier },
            None => QSource::Joint {
                weight,
                w: self.params[weight].data.clone(),
                step: q.step,
                s_n: self.params[q.step].data[0],
                top_range,
                grad_scale: scale(w_bar.len(), top_range.1),
            },
        };
        let act_step = q.act_steps[level];
        QConvSpec {
            geom: *geom,
            source,
            w_bar,
            level,
            n: self.n,
            level_range,
            s_i,
            z,
            act_step,
            s_a: self.params[act_step].data[0],
            act_qp,
            act_grad_scale: scale(in_count, act_qp),
        }
    }

    /// Record layers `range` on the tape starting from node `x`.
    pub fn forward_range(
        &mut self,
        tape: &mut Tape,
        mut x: NodeId,
        range: std::ops::Range<usize>,
        prec: Precision,
        mode: Mode,
    ) -> NodeId {
        let level = match prec {
            Precision::Full => 0,
            Precision::Level(l) => l,
        };
        for li in range {
            x = match &self.layers[li] {
                NetLayer::Conv { geom, weight, bias, quant, .. } => match (quant, prec) {
                    (Some(q), Precision::Level(l)) => {
                        let spec = self.qconv_spec(geom, *weight, q, l, tape.value(x).per_sample());
                        tape.qconv(x, spec)
                    }
                    _ => {
                        let b = bias.map(|b| (b, self.params[b].data.as_slice()));
                        tape.conv(x, *geom, (*weight, &self.params[*weight].data), b)
                    }
                },
                NetLayer::BatchNorm { scale, shift, stats, .. } => {
                    let pick = |v: &Vec<usize>| v[if v.len() == 1 { 0 } else { level }];
                    let (sc, sh, st) = (pick(scale), pick(shift), pick(stats));
                    let (ps, pb) = (&self.params[sc].data, &self.params[sh].data);
                    match mode {
                        Mode::Train => tape.bn_train(x, (sc, ps), (sh, pb), &mut self.stats[st]),
                        Mode::Eval => tape.bn_eval(x, (sc, ps), (sh, pb), &self.stats[st]),
                    }
                }
                NetLayer::Relu => tape.relu(x),
                NetLayer::MaxPool { size } => tape.max_pool(x, *size),
                NetLayer::Flatten => tape.flatten(x),
            };
        }
        x
    }

    pub fn forward(&mut self, tape: &mut Tape, x: NodeId, prec: Precision, mode: Mode) -> NodeId {
        let len = self.layers.len();
        self.forward_range(tape, x, 0..len, prec, mode)
    }

    /// Evaluation-mode logits through the training graph.
    pub fn eval_logits(&mut self, x: &[f64], prec: Precision, exec: crate::par::Execution) -> Vec<f64> {
        let per: usize = self.input.iter().product();
        let [c, h, w] = self.input;
        let mut tape = Tape::new(exec);
        let inp = tape.input(crate::train::Tensor::new(x.to_vec(), [x.len() / per, c, h, w]));
        let out = self.forward(&mut tape, inp, prec, Mode::Eval);
        tape.value(out).data.clone()
    }

    /// Copy with every parameter and statistic rounded to `f32`, the precision
    /// the file format stores.
    pub fn rounded(&self) -> Self {
        let mut net = self.clone();
        let r = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        for p in &mut net.params {
            r(&mut p.data);
        }
        for s in &mut net.stats {
            r(&mut s.mean);
            r(&mut s.var);
        }
        for l in &mut net.layers {
            if let NetLayer::Conv { quant: Some(QuantSlots { carrier: Some(c), .. }), .. } = l {
                c.step = c.step as f32 as f64;
            }
        }
        net
    }

    /// Export the quantized model. Values are rounded to `f32` first so the
    /// stored model matches `self.rounded()` exactly.
    pub fn to_layered(&self) -> Result<LayeredModel> {
        let net = self.rounded();
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let top_bits = net.basic_bits + net.n as u32;
        let levels = net.levels();
        let mut layers = Vec::with_capacity(net.layers.len());
        for l in &net.layers {
            layers.push(match l {
                NetLayer::Conv { geom, dense, weight, bias, quant } => match quant {
                    None if *dense => Layer::Linear {
                        geom: *geom,
                        weight: f(&net.params[*weight].data),
                        bias: bias.map(|b| f(&net.params[b].data)).unwrap_or_else(|| vec![0.0; geom.out_ch]),
                    },
                    None => {
                        if bias.is_some() {
                            return Err(Error::validation("convolution bias is not representable"));
                        }
                        Layer::Conv { geom: *geom, weight: f(&net.params[*weight].data) }
                    }
                    Some(q) => {
                        if q.carrier.as_ref().is_some_and(|c| c.step != net.params[q.step].data[0]) {
                            return Err(Error::validation("only top-level carrier weights can be exported"));
                        }
                        let (w_top, s_n, _) = net.level_weights(*weight, q, net.n);
                        let top = QTensor::new(
                            w_top,
                            vec![geom.out_ch, geom.in_ch, geom.kh, geom.kw],
                            QuantParams::new(s_n, top_bits, true)?,
                        )?;
                        let stack = decompose(&top, net.basic_bits)?;
                        let act_steps = q.act_steps.iter().map(|&a| net.params[a].data[0] as f32).collect();
                        if *dense {
                            Layer::QLinear { geom: *geom, stack, act_steps }
                        } else {
                            Layer::QConv { geom: *geom, stack, act_steps }
                        }
                    }
                },
                NetLayer::BatchNorm { scale, shift, stats, .. } => {
                    let pick = |v: &Vec<usize>, lv: usize| v[if v.len() == 1 { 0 } else { lv }];
                    let sets = (0..levels)
                        .map(|lv| {
                            let st = &net.stats[pick(stats, lv)];
                            BnParams {
                                mean: f(&st.mean),
                                var: f(&st.var),
                                scale: f(&net.params[pick(scale, lv)].data),
                                shift: f(&net.params[pick(shift, lv)].data),
                            }
                        })
                        .collect();
                    Layer::BatchNorm { sets }
                }
                NetLayer::Relu => Layer::Relu,
                NetLayer::MaxPool { size } => Layer::MaxPool { size: *size },
                NetLayer::Flatten => Layer::Flatten,
            });
        }
        let model = LayeredModel {
            basic_bits: net.basic_bits,
            n: net.n,
            compensation: net.compensation,
            input: net.input,
            layers,
        };
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv { out: 2, kernel: 3, stride: 1, pad: 1, quantized: false },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Conv { out: 3, kernel: 3, stride: 1, pad: 1, quantized: true },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { out: 4, quantized: false },
        ]
    }

    #[test]
    fn bn_mode_parameter_progression() {
        let count = |m| Network::build(&small_spec(), [1, 4, 4], 2, 2, true, m, 1).unwrap().bn_parameter_count();
        let (s, st, f) = (count(BnMode::Shared), count(BnMode::Stats), count(BnMode::Full));
        assert_eq!(st, 2 * s);
        assert_eq!(f, 3 * s);
    }

    #[test]
    fn builds_and_exports() {
        let net = Network::build(&small_spec(), [1, 4, 4], 2, 2, true, BnMode::Full, 1).unwrap();
        assert_eq!(net.classes(), 4);
        assert_eq!(net.shared_prefix(), 1);
        let m = net.to_layered().unwrap();
        assert_eq!(m.num_classes().unwrap(), 4);
        assert_eq!(m.quantized_layers().count(), 1);
    }
}
