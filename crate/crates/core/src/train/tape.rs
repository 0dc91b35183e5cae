//! Reverse-mode tape over batched `[N, C, H, W]` tensors.
//!
//! Nodes are appended in evaluation order, so every consumer sits after its
//! inputs and a reverse sweep from a loss node sees each node only after all
//! of its consumers. Each op keeps what its backward rule needs.

use std::collections::BTreeMap;

use crate::kernels::{self, col2im, gemm, im2col};
use crate::model::ConvGeom;
use crate::par::{map_indexed, sum_ordered, Execution};
use crate::quant::quantize_scalar;
use crate::train::ste;
use crate::train::KdMode;

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: [usize; 4],
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: [usize; 4]) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor { data, shape }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn per_sample(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let p = self.per_sample();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn scalar(&self) -> f64 {
        self.data[0]
    }
}

/// Parameter gradients keyed by parameter id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    pub params: BTreeMap<ParamId, Vec<f64>>,
}

impl Grads {
    fn add(&mut self, id: ParamId, g: Vec<f64>) {
        match self.params.get_mut(&id) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
            None => {
                self.params.insert(id, g);
            }
        }
    }

    fn add_scalar(&mut self, id: ParamId, g: f64) {
        self.add(id, vec![g]);
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }
}

/// Where a quantized layer's level weights come from.
#[derive(Debug, Clone)]
pub enum QSource {
    /// `w̄_i = ⌊clip(round(w/s_n))/2^(n−i)⌋` from source weights `w` and step `s_n`.
    Joint { weight: ParamId, w: Vec<f64>, step: ParamId, s_n: f64, top_range: (i32, i32), grad_scale: f64 },
    /// `w̄_i = 2·base + [r ≥ 0]` from a real-valued carrier `r`.
    Carrier { carrier: ParamId },
}

/// Everything a quantized convolution node needs for both directions.
#[derive(Debug, Clone)]
pub struct QConvSpec {
    pub geom: ConvGeom,
    pub source: QSource,
    /// Level-`i` integer weights.
    pub w_bar: Vec<i32>,
    pub level: usize,
    pub n: usize,
    pub level_range: (i32, i32),
    pub s_i: f64,
    pub z: f64,
    pub act_step: ParamId,
    pub s_a: f64,
    pub act_qp: i32,
    pub act_grad_scale: f64,
}

#[derive(Debug)]
enum Op {
    Input,
    Conv {
        x: NodeId,
        geom: ConvGeom,
        in_hw: (usize, usize),
        weight: ParamId,
        w: Vec<f64>,
        bias: Option<ParamId>,
        cols: Vec<Vec<f64>>,
    },
    QConv {
        x: NodeId,
        spec: Box<QConvSpec>,
        in_hw: (usize, usize),
        /// Per-sample columns of quantized activations (integer valued).
        cols: Vec<Vec<f64>>,
    },
    BnTrain {
        x: NodeId,
        scale: ParamId,
        shift: ParamId,
        gamma: Vec<f64>,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    BnEval {
        x: NodeId,
        scale: ParamId,
        shift: ParamId,
        gamma: Vec<f64>,
        mean: Vec<f64>,
        inv: Vec<f64>,
    },
    Relu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        arg: Vec<Vec<usize>>,
    },
    Reshape {
        x: NodeId,
    },
    /// Loss with its gradient w.r.t. `x` precomputed.
    Loss {
        x: NodeId,
        grad: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Running batch-norm statistics updated by training-mode nodes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    pub exec: Execution,
}

impl Tape {
    pub fn new(exec: Execution) -> Self {
        Tape { nodes: Vec::new(), exec }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn conv(
        &mut self,
        x: NodeId,
        geom: ConvGeom,
        weight: (ParamId, &[f64]),
        bias: Option<(ParamId, &[f64])>,
    ) -> NodeId {
        let xv = &self.nodes[x].value;
        let [n, _, h, w] = xv.shape;
        let (oh, ow) = geom.out_hw(h, w).expect("shape checked when the network was built");
        let wv = weight.1;
        let bv = bias.map(|b| b.1);
        let outs = map_indexed(self.exec, n, |i| {
            let cols = im2col(xv.sample(i), h, w, &geom, oh, ow);
            let y = kernels::conv_cols(&cols, &geom, oh * ow, wv, bv);
            (cols, y)
        });
        let mut data = Vec::with_capacity(n * geom.out_ch * oh * ow);
        let mut cols = Vec::with_capacity(n);
        for (c, y) in outs {
            cols.push(c);
            data.extend(y);
        }
        let op = Op::Conv { x, geom, in_hw: (h, w), weight: weight.0, w: wv.to_vec(), bias: bias.map(|b| b.0), cols };
        self.push(Tensor::new(data, [n, geom.out_ch, oh, ow]), op)
    }

    pub fn qconv(&mut self, x: NodeId, spec: QConvSpec) -> NodeId {
        let xv = &self.nodes[x].value;
        let [n, _, h, w] = xv.shape;
        let g = spec.geom;
        let (oh, ow) = g.out_hw(h, w).expect("shape checked when the network was built");
        let p = oh * ow;
        let taps = g.in_ch * g.kh * g.kw;
        let wf: Vec<f64> = spec.w_bar.iter().map(|&v| v as f64).collect();
        let outs = map_indexed(self.exec, n, |i| {
            let a: Vec<f64> =
                xv.sample(i).iter().map(|&v| quantize_scalar(v, spec.s_a, 0, spec.act_qp) as f64).collect();
            let cols = im2col(&a, h, w, &g, oh, ow);
            let mut sums = vec![0.0; p];
            for k in 0..taps {
                for (s, &v) in sums.iter_mut().zip(&cols[k * p..(k + 1) * p]) {
                    *s += v;
                }
            }
            let mut acc = vec![0.0; g.out_ch * p];
            gemm(g.out_ch, taps, p, &wf, false, &cols, false, 0.0, &mut acc);
            let y: Vec<f64> = acc
                .iter()
                .enumerate()
                .map(|(j, &v)| kernels::scale_output(v, spec.z, sums[j % p], spec.s_i, spec.s_a))
                .collect();
            (cols, y)
        });
        let mut data = Vec::with_capacity(n * g.out_ch * p);
        let mut cols = Vec::with_capacity(n);
        for (c, y) in outs {
            cols.push(c);
            data.extend(y);
        }
        self.push(Tensor::new(data, [n, g.out_ch, oh, ow]), Op::QConv { x, spec: Box::new(spec), in_hw: (h, w), cols })
    }

    /// Batch-statistics normalization; updates `running` with momentum 0.1
    /// (unbiased variance).
    pub fn bn_train(
        &mut self,
        x: NodeId,
        scale: (ParamId, &[f64]),
        shift: (ParamId, &[f64]),
        running: &mut RunningStats,
    ) -> NodeId {
        let xv = &self.nodes[x].value;
        let [n, c, h, w] = xv.shape;
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += xv.data[(s * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for s in 0..n {
            for ch in 0..c {
                var[ch] += xv.data[(s * c + ch) * hw..][..hw].iter().map(|&v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + kernels::BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.data.len()];
        let mut y = vec![0.0; xv.data.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for j in base..base + hw {
                    xhat[j] = (xv.data[j] - mean[ch]) * inv[ch];
                    y[j] = xhat[j] * scale.1[ch] + shift.1[ch];
                }
            }
        }
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for ch in 0..c {
            running.mean[ch] = (1.0 - BN_MOMENTUM) * running.mean[ch] + BN_MOMENTUM * mean[ch];
            running.var[ch] = (1.0 - BN_MOMENTUM) * running.var[ch] + BN_MOMENTUM * var[ch] * unbias;
        }
        let op = Op::BnTrain { x, scale: scale.0, shift: shift.0, gamma: scale.1.to_vec(), xhat, inv };
        self.push(Tensor::new(y, [n, c, h, w]), op)
    }

    /// Running-statistics normalization through the shared inference kernel.
    pub fn bn_eval(
        &mut self,
        x: NodeId,
        scale: (ParamId, &[f64]),
        shift: (ParamId, &[f64]),
        stats: &RunningStats,
    ) -> NodeId {
        let xv = &self.nodes[x].value;
        let [_, c, h, w] = xv.shape;
        let mut y = xv.data.clone();
        for s in y.chunks_mut(c * h * w) {
            kernels::bn_eval(s, h * w, &stats.mean, &stats.var, scale.1, shift.1);
        }
        let inv = stats.var.iter().map(|&v| 1.0 / (v + kernels::BN_EPS).sqrt()).collect();
        let op =
            Op::BnEval { x, scale: scale.0, shift: shift.0, gamma: scale.1.to_vec(), mean: stats.mean.clone(), inv };
        self.push(Tensor::new(y, xv.shape), op)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let y = xv.data.iter().map(|&v| kernels::relu(v)).collect();
        self.push(Tensor::new(y, xv.shape), Op::Relu { x })
    }

    pub fn max_pool(&mut self, x: NodeId, size: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        let [n, c, h, w] = xv.shape;
        let outs = map_indexed(self.exec, n, |i| kernels::max_pool(xv.sample(i), c, h, w, size));
        let mut data = Vec::new();
        let mut arg = Vec::with_capacity(n);
        for (v, a) in outs {
            data.extend(v);
            arg.push(a);
        }
        self.push(Tensor::new(data, [n, c, h / size, w / size]), Op::MaxPool { x, arg })
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let shape = [xv.shape[0], xv.per_sample(), 1, 1];
        let data = xv.data.clone();
        self.push(Tensor::new(data, shape), Op::Reshape { x })
    }

    /// Mean cross-entropy of logits `[N, K]` against `labels`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u8]) -> NodeId {
        let lv = &self.nodes[logits].value;
        let k = lv.per_sample();
        let n = lv.batch();
        let mut loss = 0.0;
        let mut grad = vec![0.0; n * k];
        for (i, &y) in labels.iter().enumerate().take(n) {
            let row = lv.sample(i);
            let p = kernels::softmax(row);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y as usize];
            for j in 0..k {
                grad[i * k + j] = (p[j] - if j == y as usize { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        self.push(Tensor::new(vec![loss / n as f64], [1, 1, 1, 1]), Op::Loss { x: logits, grad })
    }

    /// Self-distillation loss of student logits against constant teacher
    /// logits; no gradient reaches the teacher.
    pub fn distill(&mut self, student: NodeId, teacher: &[f64], mode: KdMode) -> NodeId {
        let sv = &self.nodes[student].value;
        let k = sv.per_sample();
        let n = sv.batch();
        let mut loss = 0.0;
        let mut grad = vec![0.0; n * k];
        for i in 0..n {
            let (l, g) = crate::train::kd::kd_sample(sv.sample(i), &teacher[i * k..(i + 1) * k], mode);
            loss += l;
            for j in 0..k {
                grad[i * k + j] = g[j] / n as f64;
            }
        }
        self.push(Tensor::new(vec![loss / n as f64], [1, 1, 1, 1]), Op::Loss { x: student, grad })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.scalar() + self.nodes[b].value.scalar();
        self.push(Tensor::new(vec![v], [1, 1, 1, 1]), Op::Add { a, b })
    }

    /// Gradients of scalar node `loss` w.r.t. every parameter it depends on.
    pub fn backward(&self, loss: NodeId) -> Grads {
        let mut grads = Grads::default();
        let mut node_grads: Vec<Option<Vec<f64>>> = (0..=loss).map(|_| None).collect();
        node_grads[loss] = Some(vec![1.0]);
        let add_to = |ng: &mut Vec<Option<Vec<f64>>>, id: NodeId, g: Vec<f64>| match &mut ng[id] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
            slot => *slot = Some(g),
        };
        for id in (0..=loss).rev() {
            let Some(g) = node_grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Add { a, b } => {
                    add_to(&mut node_grads, *a, g.clone());
                    add_to(&mut node_grads, *b, g);
                }
                Op::Loss { x, grad } => {
                    add_to(&mut node_grads, *x, grad.iter().map(|v| v * g[0]).collect());
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[*x].value.data;
                    let dx = g.iter().zip(xv).map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 }).collect();
                    add_to(&mut node_grads, *x, dx);
                }
                Op::Reshape { x } => add_to(&mut node_grads, *x, g),
                Op::MaxPool { x, arg } => {
                    let xv = &self.nodes[*x].value;
                    let per_in = xv.per_sample();
                    let per_out = node.value.per_sample();
                    let mut dx = vec![0.0; xv.data.len()];
                    for (s, a) in arg.iter().enumerate() {
                        for (j, &src) in a.iter().enumerate() {
                            dx[s * per_in + src] += g[s * per_out + j];
                        }
                    }
                    add_to(&mut node_grads, *x, dx);
                }
                Op::BnTrain { x, scale, shift, gamma, xhat, inv } => {
                    let [n, c, h, w] = node.value.shape;
                    let hw = h * w;
                    let m = (n * hw) as f64;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for j in base..base + hw {
                                dgamma[ch] += g[j] * xhat[j];
                                dbeta[ch] += g[j];
                            }
                        }
                    }
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gamma[ch] * inv[ch] / m;
                            let base = (s * c + ch) * hw;
                            for j in base..base + hw {
                                dx[j] = k * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                            }
                        }
                    }
                    grads.add(*scale, dgamma);
                    grads.add(*shift, dbeta);
                    add_to(&mut node_grads, *x, dx);
                }
                Op::BnEval { x, scale, shift, gamma, mean, inv } => {
                    let [n, c, h, w] = node.value.shape;
                    let hw = h * w;
                    let xv = &self.nodes[*x].value.data;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for j in base..base + hw {
                                dgamma[ch] += g[j] * (xv[j] - mean[ch]) * inv[ch];
                                dbeta[ch] += g[j];
                                dx[j] = g[j] * inv[ch] * gamma[ch];
                            }
                        }
                    }
                    grads.add(*scale, dgamma);
                    grads.add(*shift, dbeta);
                    add_to(&mut node_grads, *x, dx);
                }
                Op::Conv { x, geom, in_hw, weight, w, bias, cols } => {
                    let (h, wd) = *in_hw;
                    let [n, o, oh, ow] = node.value.shape;
                    let p = oh * ow;
                    let taps = geom.in_ch * geom.kh * geom.kw;
                    let parts = map_indexed(self.exec, n, |s| {
                        let gs = &g[s * o * p..(s + 1) * o * p];
                        let mut dw = vec![0.0; o * taps];
                        gemm(o, p, taps, gs, false, &cols[s], true, 0.0, &mut dw);
                        let mut dcols = vec![0.0; taps * p];
                        gemm(taps, o, p, w, true, gs, false, 0.0, &mut dcols);
                        (dw, col2im(&dcols, h, wd, geom, oh, ow))
                    });
                    let (dws, dxs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
                    grads.add(*weight, sum_ordered(dws, o * taps));
                    if let Some(b) = bias {
                        let mut db = vec![0.0; o];
                        for s in 0..n {
                            for ch in 0..o {
                                db[ch] += g[(s * o + ch) * p..][..p].iter().sum::<f64>();
                            }
                        }
                        grads.add(*b, db);
                    }
                    add_to(&mut node_grads, *x, dxs.concat());
                }
                Op::QConv { x, spec, in_hw, cols } => {
                    self.qconv_backward(&g, *x, spec, *in_hw, cols, node, &mut grads, &mut node_grads);
                }
            }
        }
        grads
    }

    #[allow(clippy::too_many_arguments)]
    fn qconv_backward(
        &self,
        g: &[f64],
        x: NodeId,
        spec: &QConvSpec,
        (h, wd): (usize, usize),
        cols: &[Vec<f64>],
        node: &Node,
        grads: &mut Grads,
        node_grads: &mut [Option<Vec<f64>>],
    ) {
        let geom = &spec.geom;
        let [n, o, oh, ow] = node.value.shape;
        let p = oh * ow;
        let taps = geom.in_ch * geom.kh * geom.kw;
        // effective real weights (w̄_i + z)·s_i
        let w_hat: Vec<f64> = spec.w_bar.iter().map(|&v| (v as f64 + spec.z) * spec.s_i).collect();
        let xv = &self.nodes[x].value;
        let parts = map_indexed(self.exec, n, |s| {
            let gs = &g[s * o * p..(s + 1) * o * p];
            let mut dw = vec![0.0; o * taps];
            gemm(o, p, taps, gs, false, &cols[s], true, 0.0, &mut dw);
            let mut dcols = vec![0.0; taps * p];
            gemm(taps, o, p, &w_hat, true, gs, false, 0.0, &mut dcols);
            let da_hat = col2im(&dcols, h, wd, geom, oh, ow);
            let mut ds_a = 0.0;
            let mut dx = vec![0.0; da_hat.len()];
            for (j, (&a, &d)) in xv.sample(s).iter().zip(&da_hat).enumerate() {
                let a_bar = quantize_scalar(a, spec.s_a, 0, spec.act_qp);
                ds_a += d * ste::act_step_branch(a, spec.s_a, a_bar, spec.act_qp);
                if ste::act_mask(a, spec.s_a, spec.act_qp) {
                    dx[j] = d;
                }
            }
            (dw, (dx, ds_a))
        });
        let (dws, rest): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        // ∂L/∂ŵ: columns hold ā, so scale by s_a to get â
        let d_what: Vec<f64> = sum_ordered(dws, o * taps).into_iter().map(|v| v * spec.s_a).collect();
        let mut dx_all = Vec::with_capacity(xv.data.len());
        let mut ds_a = 0.0;
        for (dx, d) in rest {
            dx_all.extend(dx);
            ds_a += d;
        }
        grads.add_scalar(spec.act_step, ds_a * spec.act_grad_scale);
        match &spec.source {
            QSource::Joint { weight, w, step, s_n, top_range, grad_scale } => {
                let (qn, qp) = *top_range;
                let (lqn, lqp) = spec.level_range;
                let mut dw = vec![0.0; w.len()];
                let mut ds = 0.0;
                for j in 0..w.len() {
                    let up = d_what[j];
                    dw[j] = ste::ste_weight_grad(up * spec.s_i, spec.s_i, w[j], *s_n, qn, qp);
                    ds += ste::step_size_grad(up, w[j], spec.s_i, spec.w_bar[j], lqn, lqp) + spec.z * up;
                }
                grads.add(*weight, dw);
                grads.add_scalar(*step, ste::chain_to_source(ds, spec.level, spec.n) * grad_scale);
            }
            QSource::Carrier { carrier } => grads.add(*carrier, d_what),
        }
        match &mut node_grads[x] {
            Some(acc) => acc.iter_mut().zip(dx_all).for_each(|(a, v)| *a += v),
            slot => *slot = Some(dx_all),
        }
    }
}
