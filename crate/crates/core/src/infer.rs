//! Integer forward pass at a chosen precision.
//!
//! Quantized layers accumulate `w̄ · ā` in `i32`, add the compensation term
//! `z · S(ā)` where `S(ā)` is the receptive-field sum of quantized
//! activations, and scale by `s_w · s_a`. Full-precision first/last layers
//! and batch norm run in `f64`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{self, im2col};
use crate::model::{ConvGeom, Layer, LayeredModel, SampleShape};
use crate::par::{map_indexed, Execution};
use crate::quant::{quant_range, quantize_scalar, QTensor, QuantParams};
use crate::vertical::compensation;

/// Unsigned activation quantizer for one layer at one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationQuantizer {
    pub step: f64,
    pub bits: u32,
}

impl ActivationQuantizer {
    pub fn new(step: f64, bits: u32) -> Result<Self> {
        QuantParams::new(step, bits, false)?;
        Ok(ActivationQuantizer { step, bits })
    }

    pub fn q_max(&self) -> i32 {
        quant_range(self.bits, false).map(|r| r.1).unwrap_or(0)
    }

    #[inline]
    pub fn quantize(&self, v: f64) -> i32 {
        quantize_scalar(v, self.step, 0, self.q_max())
    }
}

/// Quantize non-negative activations; negative inputs clip to 0.
pub fn quantize_activation(a: &[f64], shape: &[usize], q: ActivationQuantizer) -> Result<QTensor> {
    if let Some(index) = a.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let params = QuantParams::new(q.step, q.bits, false)?;
    QTensor::new(a.iter().map(|&v| q.quantize(v)).collect(), shape.to_vec(), params)
}

/// Largest `|Σ w̄·ā|` possible for the given widths and fan-in.
pub fn accumulator_bound(weight_bits: u32, act_bits: u32, taps: usize) -> Result<i64> {
    let (qn, _) = quant_range(weight_bits, true)?;
    let (_, qp) = quant_range(act_bits, false)?;
    Ok(qn as i64 * qp as i64 * taps as i64)
}

fn check_accumulator(w: &QTensor, act_bits: u32, taps: usize) -> Result<()> {
    let bound = accumulator_bound(w.bits(), act_bits, taps)?;
    let sum_bound = quant_range(act_bits, false)?.1 as i64 * taps as i64;
    if bound > i32::MAX as i64 || sum_bound > i32::MAX as i64 {
        return Err(Error::validation(format!(
            "{}-bit weights x {act_bits}-bit activations over {taps} taps may overflow a 32-bit accumulator",
            w.bits()
        )));
    }
    Ok(())
}

/// Integer accumulators `Σ w̄·ā` and receptive-field sums `S(ā)` for one sample.
pub fn conv_int_sample(w: &[i32], a: &[i32], h: usize, wd: usize, g: &ConvGeom) -> (Vec<i32>, Vec<i32>) {
    let (oh, ow) = g.out_hw(h, wd).expect("geometry checked by caller");
    let p = oh * ow;
    let taps = g.in_ch * g.kh * g.kw;
    let cols = im2col(a, h, wd, g, oh, ow);
    let mut sums = vec![0i32; p];
    for k in 0..taps {
        for (s, &v) in sums.iter_mut().zip(&cols[k * p..(k + 1) * p]) {
            *s += v;
        }
    }
    let mut acc = vec![0i32; g.out_ch * p];
    for o in 0..g.out_ch {
        let out = &mut acc[o * p..(o + 1) * p];
        for k in 0..taps {
            let wv = w[o * taps + k];
            if wv == 0 {
                continue;
            }
            for (y, &v) in out.iter_mut().zip(&cols[k * p..(k + 1) * p]) {
                *y += wv * v;
            }
        }
    }
    (acc, sums)
}

fn scale_all(acc: &[i32], sums: &[i32], p: usize, z: f64, s_w: f64, s_a: f64) -> Vec<f64> {
    acc.iter().enumerate().map(|(i, &v)| kernels::scale_output(v as f64, z, sums[i % p] as f64, s_w, s_a)).collect()
}

/// Quantized convolution over a batch `ā: [N, C, H, W]`, weights `[O, C, kh, kw]`.
pub fn conv2d_q(w: &QTensor, a: &QTensor, z: f64, s_w: f64, s_a: f64, geom: &ConvGeom) -> Result<Vec<f64>> {
    let [n, c, h, wd] = match a.shape[..] {
        [n, c, h, wd] => [n, c, h, wd],
        _ => return Err(Error::validation(format!("activation shape {:?} is not [N,C,H,W]", a.shape))),
    };
    if c != geom.in_ch || w.shape != [geom.out_ch, geom.in_ch, geom.kh, geom.kw] {
        return Err(Error::validation(format!(
            "weights {:?} / activations {:?} do not match {geom:?}",
            w.shape, a.shape
        )));
    }
    check_accumulator(w, a.bits(), geom.in_ch * geom.kh * geom.kw)?;
    let (oh, ow) = geom.out_hw(h, wd)?;
    let per = c * h * wd;
    let mut out = Vec::with_capacity(n * geom.out_ch * oh * ow);
    for i in 0..n {
        let (acc, sums) = conv_int_sample(&w.data, &a.data[i * per..(i + 1) * per], h, wd, geom);
        out.extend(scale_all(&acc, &sums, oh * ow, z, s_w, s_a));
    }
    Ok(out)
}

/// Quantized dense layer: `w: [O, I]`, `ā: [N, I]`.
pub fn linear_q(w: &QTensor, a: &QTensor, z: f64, s_w: f64, s_a: f64) -> Result<Vec<f64>> {
    let (o, i) = match w.shape[..] {
        [o, i] => (o, i),
        _ => return Err(Error::validation(format!("weight shape {:?} is not [O,I]", w.shape))),
    };
    let n = match a.shape[..] {
        [n, f] if f == i => n,
        _ => return Err(Error::validation(format!("activation shape {:?} does not match {i} features", a.shape))),
    };
    let geom = ConvGeom::dense(i, o);
    let w4 = QTensor { data: w.data.clone(), shape: vec![o, i, 1, 1], params: w.params };
    let a4 = QTensor { data: a.data.clone(), shape: vec![n, i, 1, 1], params: a.params };
    conv2d_q(&w4, &a4, z, s_w, s_a, &geom)
}

/// Channel-wise batch norm over a batch `[N, C, H·W]` of `batch` samples.
pub fn batchnorm(x: &[f64], batch: usize, bn: &BnTable) -> Result<Vec<f64>> {
    if bn.var.iter().any(|&v| v < 0.0) {
        return Err(Error::validation("negative batch-norm variance"));
    }
    let c = bn.mean.len();
    if batch == 0 || c == 0 || !x.len().is_multiple_of(batch * c) {
        return Err(Error::validation("batch-norm channel mismatch"));
    }
    let hw = x.len() / (batch * c);
    let mut y = x.to_vec();
    for s in y.chunks_mut(c * hw) {
        kernels::bn_eval(s, hw, &bn.mean, &bn.var, &bn.scale, &bn.shift);
    }
    Ok(y)
}

/// Batch-norm parameters for one level, widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnTable {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl From<&crate::model::BnParams> for BnTable {
    fn from(p: &crate::model::BnParams) -> Self {
        let w = |v: &[f32]| v.iter().map(|&x| x as f64).collect();
        BnTable { mean: w(&p.mean), var: w(&p.var), scale: w(&p.scale), shift: w(&p.shift) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AssembledLayer {
    Conv { geom: ConvGeom, weight: Vec<f64>, bias: Option<Vec<f64>> },
    QConv { geom: ConvGeom, weight: QTensor, z: f64, act: ActivationQuantizer, level: usize },
    BatchNorm { table: BnTable, level: usize },
    Relu,
    MaxPool { size: usize },
    Flatten,
}

/// A runnable model with one precision chosen per quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledModel {
    pub input: SampleShape,
    pub layers: Vec<AssembledLayer>,
    pub levels: Vec<usize>,
    pub basic_bits: u32,
    pub n: usize,
}

/// Level used by each batch-norm layer under a per-quantized-layer level
/// assignment: the nearest preceding quantized layer's level, else the
/// nearest following one, else `fallback`.
pub fn bn_levels(model: &LayeredModel, levels: &[usize], fallback: usize) -> Vec<Option<usize>> {
    let mut q_level = Vec::with_capacity(model.layers.len());
    let mut qi = 0;
    for l in &model.layers {
        if l.is_quantized() {
            q_level.push(Some(levels[qi]));
            qi += 1;
        } else {
            q_level.push(None);
        }
    }
    (0..model.layers.len())
        .map(|i| {
            if !matches!(model.layers[i], Layer::BatchNorm { .. }) {
                return None;
            }
            let before = q_level[..i].iter().rev().find_map(|&l| l);
            let after = q_level[i..].iter().find_map(|&l| l);
            Some(before.or(after).unwrap_or(fallback))
        })
        .collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Weights of a stack at level `k` of a depth-`n` model: `2^k·w̄_0 + Σ 2^(k−j)·b_j`.
/// The stack may hold fewer than `n` planes as long as it holds `k`.
fn stack_at(stack: &crate::vertical::VerticalStack, k: usize, n: usize) -> Result<QTensor> {
    if k > stack.enhance.len() {
        return Err(Error::MissingLayers { levels: (stack.enhance.len() + 1..=k).collect() });
    }
    let mut data = stack.basic.data.clone();
    for plane in &stack.enhance[..k] {
        for (d, &b) in data.iter_mut().zip(&plane.data) {
            *d = 2 * *d + b as i32;
        }
    }
    let step = stack.top_step * (1u64 << (n - k)) as f64;
    QTensor::new(data, stack.basic.shape.clone(), QuantParams::new(step, stack.basic_bits() + k as u32, true)?)
}

impl AssembledModel {
    /// Assemble with `levels[m]` enhance layers for the `m`-th quantized layer.
    pub fn from_layered(model: &LayeredModel, levels: &[usize]) -> Result<Self> {
        let nq = model.quantized_layers().count();
        if levels.len() != nq {
            return Err(Error::invalid(format!("{} levels for {nq} quantized layers", levels.len())));
        }
        if let Some(&k) = levels.iter().find(|&&k| k > model.n) {
            return Err(Error::invalid(format!("level {k} exceeds top level {}", model.n)));
        }
        let fallback = levels.iter().copied().max().unwrap_or(model.n);
        let bn = bn_levels(model, levels, fallback);
        let mut qi = 0;
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, layer) in model.layers.iter().enumerate() {
            layers.push(match layer {
                Layer::Conv { geom, weight } => {
                    AssembledLayer::Conv { geom: *geom, weight: to_f64(weight), bias: None }
                }
                Layer::Linear { geom, weight, bias } => {
                    AssembledLayer::Conv { geom: *geom, weight: to_f64(weight), bias: Some(to_f64(bias)) }
                }
                Layer::QConv { geom, stack, act_steps } | Layer::QLinear { geom, stack, act_steps } => {
                    let k = levels[qi];
                    qi += 1;
                    let weight = stack_at(stack, k, model.n)?;
                    let z = if model.compensation { compensation(k, model.n)? } else { 0.0 };
                    let act = ActivationQuantizer::new(act_steps[k] as f64, model.basic_bits + k as u32)?;
                    check_accumulator(&weight, act.bits, geom.in_ch * geom.kh * geom.kw)?;
                    AssembledLayer::QConv { geom: *geom, weight, z, act, level: k }
                }
                Layer::BatchNorm { sets } => {
                    let level = bn[i].expect("batch-norm layer has a level");
                    let set = sets.get(level).ok_or_else(|| Error::validation("missing batch-norm set"))?;
                    if set.var.iter().any(|&v| v < 0.0) {
                        return Err(Error::validation(format!("layer {i}: negative batch-norm variance")));
                    }
                    AssembledLayer::BatchNorm { table: set.into(), level }
                }
                Layer::Relu => AssembledLayer::Relu,
                Layer::MaxPool { size } => AssembledLayer::MaxPool { size: *size },
                Layer::Flatten => AssembledLayer::Flatten,
            });
        }
        let m = AssembledModel {
            input: model.input,
            layers,
            levels: levels.to_vec(),
            basic_bits: model.basic_bits,
            n: model.n,
        };
        m.output_shape()?;
        Ok(m)
    }

    /// Every quantized layer at level `k`.
    pub fn uniform(model: &LayeredModel, k: usize) -> Result<Self> {
        Self::from_layered(model, &vec![k; model.quantized_layers().count()])
    }

    pub fn output_shape(&self) -> Result<SampleShape> {
        let mut s = self.input;
        for l in &self.layers {
            s = self.step_shape(l, s)?;
        }
        Ok(s)
    }

    fn step_shape(&self, l: &AssembledLayer, [c, h, w]: SampleShape) -> Result<SampleShape> {
        Ok(match l {
            AssembledLayer::Conv { geom, .. } | AssembledLayer::QConv { geom, .. } => {
                if geom.in_ch != c {
                    return Err(Error::validation(format!("layer expects {} channels, got {c}", geom.in_ch)));
                }
                let (oh, ow) = geom.out_hw(h, w)?;
                [geom.out_ch, oh, ow]
            }
            AssembledLayer::BatchNorm { table, .. } => {
                if table.mean.len() != c {
                    return Err(Error::validation("batch-norm channel mismatch"));
                }
                [c, h, w]
            }
            AssembledLayer::Relu => [c, h, w],
            AssembledLayer::MaxPool { size } => {
                if *size == 0 || h < *size || w < *size {
                    return Err(Error::validation(format!("max pool {size} on {h}x{w}")));
                }
                [c, h / size, w / size]
            }
            AssembledLayer::Flatten => [c * h * w, 1, 1],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.output_shape().map(|[c, h, w]| c * h * w).unwrap_or(0)
    }

    /// Run one sample, calling `observe(layer, input, quantizer)` before each
    /// quantized layer.
    fn run_sample(&self, x: &[f64], observe: impl FnMut(usize, &[f64], &ActivationQuantizer)) -> Vec<f64> {
        self.run_prefix(x, self.layers.len(), observe).0
    }

    fn run_prefix(
        &self,
        x: &[f64],
        end: usize,
        mut observe: impl FnMut(usize, &[f64], &ActivationQuantizer),
    ) -> (Vec<f64>, SampleShape) {
        let [mut c, mut h, mut w] = self.input;
        let mut cur = x.to_vec();
        for (li, l) in self.layers[..end].iter().enumerate() {
            match l {
                AssembledLayer::Conv { geom, weight, bias } => {
                    cur = kernels::conv_sample(&cur, h, w, geom, weight, bias.as_deref());
                    (h, w) = geom.out_hw(h, w).expect("shape validated");
                    c = geom.out_ch;
                }
                AssembledLayer::QConv { geom, weight, z, act, .. } => {
                    observe(li, &cur, act);
                    let a: Vec<i32> = cur.iter().map(|&v| act.quantize(v)).collect();
                    let (acc, sums) = conv_int_sample(&weight.data, &a, h, w, geom);
                    (h, w) = geom.out_hw(h, w).expect("shape validated");
                    c = geom.out_ch;
                    cur = scale_all(&acc, &sums, h * w, *z, weight.step(), act.step);
                }
                AssembledLayer::BatchNorm { table, .. } => {
                    kernels::bn_eval(&mut cur, h * w, &table.mean, &table.var, &table.scale, &table.shift);
                }
                AssembledLayer::Relu => cur.iter_mut().for_each(|v| *v = kernels::relu(*v)),
                AssembledLayer::MaxPool { size } => {
                    cur = kernels::max_pool(&cur, c, h, w, *size).0;
                    h /= size;
                    w /= size;
                }
                AssembledLayer::Flatten => {
                    c *= h * w;
                    h = 1;
                    w = 1;
                }
            }
        }
        (cur, [c, h, w])
    }

    /// Activations of one sample entering layer `end`, with their shape.
    pub fn forward_prefix(&self, x: &[f64], end: usize) -> (Vec<f64>, SampleShape) {
        self.run_prefix(x, end.min(self.layers.len()), |_, _, _| {})
    }

    /// Logits `[N, classes]` for a batch `[N, C, H, W]`.
    pub fn forward(&self, x: &[f64], exec: Execution) -> Result<Vec<f64>> {
        let per: usize = self.input.iter().product();
        if per == 0 || !x.len().is_multiple_of(per) {
            return Err(Error::validation(format!("input of {} values is not a batch of {:?}", x.len(), self.input)));
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let outs = map_indexed(exec, x.len() / per, |i| self.run_sample(&x[i * per..(i + 1) * per], |_, _, _| {}));
        Ok(outs.concat())
    }

    /// Activation quantization error at the input of every quantized layer.
    pub fn activation_stats(&self, x: &[f64], exec: Execution) -> Result<Vec<ActivationStat>> {
        let per: usize = self.input.iter().product();
        if per == 0 || !x.len().is_multiple_of(per) {
            return Err(Error::validation("input is not a whole batch"));
        }
        let parts = map_indexed(exec, x.len() / per, |i| {
            let mut acc: Vec<(usize, f64, f64, usize, usize)> = Vec::new();
            self.run_sample(&x[i * per..(i + 1) * per], |li, a, q| {
                let qp = q.q_max();
                let mut sq = 0.0;
                let mut mx: f64 = 0.0;
                let mut clipped = 0;
                for &v in a {
                    let qi = q.quantize(v);
                    if v / q.step > qp as f64 {
                        clipped += 1;
                    }
                    let e = v - qi as f64 * q.step;
                    sq += e * e;
                    mx = mx.max(e.abs());
                }
                acc.push((li, sq, mx, clipped, a.len()));
            });
            acc
        });
        let mut stats: Vec<ActivationStat> = Vec::new();
        for part in parts {
            for (j, (li, sq, mx, clipped, count)) in part.into_iter().enumerate() {
                if stats.len() <= j {
                    let (level, step, bits) = match &self.layers[li] {
                        AssembledLayer::QConv { level, act, .. } => (*level, act.step, act.bits),
                        _ => unreachable!("observer only fires on quantized layers"),
                    };
                    stats.push(ActivationStat {
                        layer: li,
                        level,
                        bits,
                        step,
                        mse: 0.0,
                        max_abs: 0.0,
                        clip_fraction: 0.0,
                        count: 0,
                    });
                }
                let s = &mut stats[j];
                s.mse += sq;
                s.max_abs = s.max_abs.max(mx);
                s.clip_fraction += clipped as f64;
                s.count += count;
            }
        }
        for s in &mut stats {
            if s.count > 0 {
                s.mse /= s.count as f64;
                s.clip_fraction /= s.count as f64;
            }
        }
        Ok(stats)
    }
}

/// Activation quantization error of one layer over a batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationStat {
    pub layer: usize,
    pub level: usize,
    pub bits: u32,
    pub step: f64,
    pub mse: f64,
    pub max_abs: f64,
    pub clip_fraction: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: Option<f64>,
    pub count: usize,
}

/// Top-1 (and top-5 when there are at least five classes) accuracy. Ties in
/// the logits rank the lower class index first.
pub fn accuracy(logits: &[f64], labels: &[u8], classes: usize) -> Accuracy {
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let target = row[y as usize];
        let better = row.iter().enumerate().filter(|&(j, &v)| v > target || (v == target && j < y as usize)).count();
        top1 += (better == 0) as usize;
        top5 += (better < 5) as usize;
    }
    let n = labels.len().max(1) as f64;
    Accuracy { top1: top1 as f64 / n, top5: (classes >= 5).then_some(top5 as f64 / n), count: labels.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BnParams;
    use crate::quant::QTensor;
    use crate::vertical::decompose;

    fn qt(data: Vec<i32>, shape: Vec<usize>, step: f64, bits: u32, signed: bool) -> QTensor {
        QTensor::new(data, shape, QuantParams::new(step, bits, signed).unwrap()).unwrap()
    }

    #[test]
    fn activation_cases() {
        let q = ActivationQuantizer::new(1.0, 2).unwrap();
        let t = quantize_activation(&[2.4, 10.0, -1.0], &[3], q).unwrap();
        assert_eq!(t.data, vec![2, 3, 0]);
    }

    #[test]
    fn scalar_conv_cases() {
        let g = ConvGeom { in_ch: 1, out_ch: 1, kh: 1, kw: 1, stride: 1, pad: 0 };
        let w = qt(vec![3], vec![1, 1, 1, 1], 0.5, 3, true);
        let a = qt(vec![2], vec![1, 1, 1, 1], 0.25, 2, false);
        assert_eq!(conv2d_q(&w, &a, 0.0, 0.5, 0.25, &g).unwrap(), vec![0.75]);
        assert_eq!(conv2d_q(&w, &a, 0.375, 0.5, 0.25, &g).unwrap(), vec![0.84375]);
        let wl = qt(vec![3], vec![1, 1], 0.5, 3, true);
        let al = qt(vec![2], vec![1, 1], 0.25, 2, false);
        assert_eq!(linear_q(&wl, &al, 0.375, 0.5, 0.25).unwrap(), vec![0.84375]);
    }

    #[test]
    fn folding_identity() {
        let g = ConvGeom { in_ch: 2, out_ch: 3, kh: 3, kw: 3, stride: 1, pad: 1 };
        let w = qt((0..54).map(|i| (i % 16) - 8).collect(), vec![3, 2, 3, 3], 0.125, 4, true);
        let a = qt((0..32).map(|i| (i * 5) % 16).collect(), vec![1, 2, 4, 4], 0.0625, 4, false);
        let base = conv2d_q(&w, &a, 0.0, 0.125, 0.0625, &g).unwrap();
        let comp = conv2d_q(&w, &a, 0.25, 0.125, 0.0625, &g).unwrap();
        let ones = qt(vec![1; 54], vec![3, 2, 3, 3], 0.125, 4, true);
        let sums = conv2d_q(&ones, &a, 0.0, 1.0, 1.0, &g).unwrap();
        for i in 0..base.len() {
            assert_eq!(comp[i], kernels::scale_output(base[i] / (0.125 * 0.0625), 0.25, sums[i], 0.125, 0.0625));
        }
    }

    #[test]
    fn overflow_bound() {
        assert!(accumulator_bound(4, 4, 7 * 7 * 4096).unwrap() < i32::MAX as i64);
        let w = qt(vec![0; 4], vec![1, 4, 1, 1], 1.0, 16, true);
        let a = qt(vec![0; 4], vec![1, 4, 1, 1], 1.0, 16, false);
        assert!(conv2d_q(&w, &a, 0.0, 1.0, 1.0, &ConvGeom::dense(4, 1)).is_err());
    }

    #[test]
    fn batchnorm_cases() {
        let t = BnTable { mean: vec![1.0], var: vec![1.0], scale: vec![2.0], shift: vec![1.0] };
        assert!((batchnorm(&[2.0], 1, &t).unwrap()[0] - 3.0).abs() < 1e-4);
        let bad = BnTable { var: vec![-1.0], ..t };
        assert!(batchnorm(&[2.0], 1, &bad).is_err());
    }

    fn toy_model() -> LayeredModel {
        let g = ConvGeom { in_ch: 1, out_ch: 1, kh: 1, kw: 1, stride: 1, pad: 0 };
        let top = qt(vec![4], vec![1, 1, 1, 1], 0.25, 4, true);
        LayeredModel {
            basic_bits: 2,
            n: 2,
            compensation: false,
            input: [1, 2, 2],
            layers: vec![
                Layer::Relu,
                Layer::QConv { geom: g, stack: decompose(&top, 2).unwrap(), act_steps: vec![0.5, 0.25, 0.125] },
                Layer::BatchNorm { sets: vec![BnParams::identity(1); 3] },
                Layer::Flatten,
            ],
        }
    }

    #[test]
    fn identity_network() {
        let m = toy_model();
        let x = [0.3, 0.55, 1.0, 1.7];
        for k in 0..=2 {
            let a = AssembledModel::uniform(&m, k).unwrap();
            let y = a.forward(&x, Execution::Sequential).unwrap();
            let s_a = [0.5, 0.25, 0.125][k];
            let qp = ((1 << (2 + k)) - 1) as f64;
            for (yi, xi) in y.iter().zip(&x) {
                // BN eps shrinks the output slightly
                let clipped: f64 = xi.min(qp * s_a);
                assert!((yi - clipped).abs() <= s_a / 2.0 + 1e-4, "k={k} {yi} {xi}");
            }
        }
    }

    #[test]
    fn batching_invariance() {
        let m = toy_model();
        let a = AssembledModel::uniform(&m, 1).unwrap();
        let x = [0.3, 0.55, 1.0, 1.7, 0.1, 0.2, 0.9, 0.0];
        let both = a.forward(&x, Execution::Parallel).unwrap();
        let mut sep = a.forward(&x[..4], Execution::Sequential).unwrap();
        sep.extend(a.forward(&x[4..], Execution::Sequential).unwrap());
        assert_eq!(both, sep);
    }

    #[test]
    fn accuracy_counts() {
        let logits = [0.1, 0.9, 0.8, 0.2, 0.5, 0.5];
        let acc = accuracy(&logits, &[1, 1, 0], 2);
        assert!((acc.top1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(acc.top5, None);
    }
}
