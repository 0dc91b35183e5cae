//! Post-training mixed precision: per-layer levels chosen under a total
//! weight-bit budget, followed by batch-norm recalibration.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::infer::{AssembledLayer, AssembledModel};
use crate::model::LayeredModel;
use crate::par::{map_indexed, Execution};
use crate::vertical::compensation;

const CALIB_CHUNK: usize = 256;

/// `M×(n+1)` squared reconstruction errors of every quantized layer at every
/// level against its top level, in the dequantized domain. Lower levels are
/// compensated when the model is.
pub fn layer_error_table(model: &LayeredModel, exec: Execution) -> Result<Vec<Vec<f64>>> {
    let stacks: Vec<_> = model.quantized_layers().map(|(_, s)| s).collect();
    let n = model.n;
    let rows = map_indexed(exec, stacks.len(), |m| -> Result<Vec<f64>> {
        let stack = stacks[m];
        let top = stack.assemble(n)?;
        let reference: Vec<f64> = top.data.iter().map(|&v| v as f64 * top.step()).collect();
        (0..=n)
            .map(|i| {
                let w = stack.assemble(i)?;
                let z = if model.compensation { compensation(i, n)? } else { 0.0 };
                Ok(w.data.iter().zip(&reference).map(|(&v, &r)| ((v as f64 + z) * w.step() - r).powi(2)).sum())
            })
            .collect()
    });
    rows.into_iter().collect()
}

/// Element count of every quantized layer.
pub fn layer_sizes(model: &LayeredModel) -> Vec<usize> {
    model.quantized_layers().map(|(_, s)| s.len()).collect()
}

/// Weight bits of an assignment: `Σ N_m·(basic_bits + i_m)`.
pub fn total_bits(sizes: &[usize], levels: &[usize], basic_bits: u32) -> u64 {
    sizes.iter().zip(levels).map(|(&n, &i)| n as u64 * (basic_bits as u64 + i as u64)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitAllocation {
    /// Level per quantized layer.
    pub levels: Vec<usize>,
    pub total_bits: u64,
    pub budget: u64,
    /// Sum of the chosen per-layer errors.
    pub objective: f64,
}

#[derive(Debug, Clone)]
struct State {
    cost: u64,
    objective: f64,
    levels: Vec<usize>,
}

/// Lower objective wins; equal objectives prefer more bits in earlier layers.
fn better(a: &State, b: &State) -> bool {
    a.objective < b.objective || (a.objective == b.objective && a.levels > b.levels)
}

/// Exact minimum of `Σ errors[m][i_m]` subject to `Σ N_m·K_{i_m} ≤ budget`.
///
/// Dynamic program over the extra bits spent above the basic level, keeping
/// only states no cheaper state beats.
pub fn allocate_bits(
    errors: &[Vec<f64>],
    sizes: &[usize],
    basic_bits: u32,
    n: usize,
    budget: u64,
) -> Result<BitAllocation> {
    if errors.len() != sizes.len() {
        return Err(Error::invalid(format!("{} error rows for {} layer sizes", errors.len(), sizes.len())));
    }
    if let Some(m) = errors.iter().position(|r| r.len() != n + 1) {
        return Err(Error::invalid(format!("error row {m} does not have {} levels", n + 1)));
    }
    if let Some(m) = errors.iter().position(|r| r.iter().any(|e| !e.is_finite())) {
        return Err(Error::invalid(format!("error row {m} is not finite")));
    }
    let min_bits = total_bits(sizes, &vec![0; sizes.len()], basic_bits);
    if budget < min_bits {
        return Err(Error::Infeasible { budget, min_bits });
    }
    let spare = budget - min_bits;
    let mut states = vec![State { cost: 0, objective: 0.0, levels: Vec::new() }];
    for (row, &size) in errors.iter().zip(sizes) {
        let mut next = Vec::with_capacity(states.len() * (n + 1));
        for s in &states {
            for (i, &e) in row.iter().enumerate() {
                let cost = s.cost + size as u64 * i as u64;
                if cost > spare {
                    break;
                }
                let mut levels = s.levels.clone();
                levels.push(i);
                next.push(State { cost, objective: s.objective + e, levels });
            }
        }
        next.sort_by_key(|a| a.cost);
        let mut kept: Vec<State> = Vec::new();
        let mut i = 0;
        while i < next.len() {
            let mut j = i;
            let mut best = i;
            while j < next.len() && next[j].cost == next[i].cost {
                if better(&next[j], &next[best]) {
                    best = j;
                }
                j += 1;
            }
            if kept.last().is_none_or(|k| better(&next[best], k)) {
                kept.push(next[best].clone());
            }
            i = j;
        }
        states = kept;
    }
    let best = states.pop().expect("the all-basic assignment is always feasible");
    Ok(BitAllocation { total_bits: min_bits + best.cost, budget, objective: best.objective, levels: best.levels })
}

/// Allocations for each budget; infeasible budgets are reported as errors.
pub fn budget_sweep(
    errors: &[Vec<f64>],
    sizes: &[usize],
    basic_bits: u32,
    n: usize,
    budgets: &[u64],
) -> Vec<Result<BitAllocation>> {
    budgets.iter().map(|&b| allocate_bits(errors, sizes, basic_bits, n, b)).collect()
}

/// Per-layer line of an allocation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub layer: usize,
    pub level: usize,
    pub bits: u32,
    pub elements: usize,
    pub error: f64,
}

pub fn allocation_report(model: &LayeredModel, alloc: &BitAllocation, errors: &[Vec<f64>]) -> Vec<LayerChoice> {
    model
        .quantized_layers()
        .zip(&alloc.levels)
        .zip(errors)
        .map(|(((layer, stack), &level), row)| LayerChoice {
            layer,
            level,
            bits: model.basic_bits + level as u32,
            elements: stack.len(),
            error: row[level],
        })
        .collect()
}

/// Chan et al. merge of `(count, mean, M2)` partial moments.
fn merge(a: (f64, f64, f64), b: (f64, f64, f64)) -> (f64, f64, f64) {
    let n = a.0 + b.0;
    if n == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let d = b.1 - a.1;
    (n, a.1 + d * b.0 / n, a.2 + b.2 + d * d * a.0 * b.0 / n)
}

/// Re-estimate every batch-norm layer's running mean and (population)
/// variance on `data`, layer by layer so each sees recalibrated upstream
/// statistics. Affine parameters are untouched.
pub fn recalibrate_bn(model: &AssembledModel, data: &Dataset, exec: Execution) -> Result<AssembledModel> {
    if data.is_empty() {
        return Err(Error::invalid("empty calibration set"));
    }
    if data.shape != model.input {
        return Err(Error::validation(format!(
            "calibration samples are {:?}, model expects {:?}",
            data.shape, model.input
        )));
    }
    let mut m = model.clone();
    let idx: Vec<usize> = (0..data.len()).collect();
    for li in 0..m.layers.len() {
        let AssembledLayer::BatchNorm { table, .. } = &m.layers[li] else { continue };
        let channels = table.mean.len();
        let mut total = vec![(0.0, 0.0, 0.0); channels];
        for chunk in idx.chunks(CALIB_CHUNK) {
            let (x, _) = data.gather(chunk, None);
            let per = data.per_sample();
            let parts = map_indexed(exec, chunk.len(), |s| {
                let (a, [c, h, w]) = m.forward_prefix(&x[s * per..(s + 1) * per], li);
                let hw = h * w;
                (0..c)
                    .map(|ch| {
                        let v = &a[ch * hw..(ch + 1) * hw];
                        let mean = v.iter().sum::<f64>() / hw as f64;
                        (hw as f64, mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>())
                    })
                    .collect::<Vec<_>>()
            });
            for p in parts {
                if p.len() != channels {
                    return Err(Error::validation(format!("layer {li}: batch-norm channel mismatch")));
                }
                for (t, q) in total.iter_mut().zip(p) {
                    *t = merge(*t, q);
                }
            }
        }
        let AssembledLayer::BatchNorm { table, .. } = &mut m.layers[li] else { unreachable!() };
        table.mean = total.iter().map(|t| t.1).collect();
        table.var = total.iter().map(|t| t.2 / t.0).collect();
    }
    Ok(m)
}

/// Recalibrated statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnOverride {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A stored mixed-precision configuration: levels plus recalibrated
/// batch-norm statistics, applied on top of a layered model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedPlan {
    pub allocation: BitAllocation,
    pub bn: Vec<BnOverride>,
}

impl MixedPlan {
    pub fn from_model(allocation: BitAllocation, model: &AssembledModel) -> Self {
        let bn = model
            .layers
            .iter()
            .enumerate()
            .filter_map(|(layer, l)| match l {
                AssembledLayer::BatchNorm { table, .. } => {
                    Some(BnOverride { layer, mean: table.mean.clone(), var: table.var.clone() })
                }
                _ => None,
            })
            .collect();
        MixedPlan { allocation, bn }
    }

    pub fn assemble(&self, model: &LayeredModel) -> Result<AssembledModel> {
        let mut m = AssembledModel::from_layered(model, &self.allocation.levels)?;
        for o in &self.bn {
            match m.layers.get_mut(o.layer) {
                Some(AssembledLayer::BatchNorm { table, .. })
                    if table.mean.len() == o.mean.len() && o.var.len() == o.mean.len() =>
                {
                    table.mean = o.mean.clone();
                    table.var = o.var.clone();
                }
                _ => return Err(Error::validation(format!("plan does not match the model at layer {}", o.layer))),
            }
        }
        Ok(m)
    }
}
