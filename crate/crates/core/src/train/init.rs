//! Step-size initialization from a full-precision network.

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::train::net::{Mode, NetLayer, Network, Precision};
use crate::train::{Tape, Tensor};

/// `2·mean|w| / sqrt(2^K − 1)` for a `K`-bit top quantizer.
pub fn init_weight_step(w: &[f64], top_bits: u32) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::DegenerateInit("empty weight tensor".into()));
    }
    let mean = w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::DegenerateInit(format!("mean |w| = {mean}")));
    }
    Ok(2.0 * mean / (((1u64 << top_bits) - 1) as f64).sqrt())
}

/// `max|a| / (2^K − 1)` for a `K`-bit unsigned quantizer.
pub fn init_act_step(max_abs: f64, bits: u32) -> Result<f64> {
    if !(max_abs > 0.0 && max_abs.is_finite()) {
        return Err(Error::DegenerateInit(format!("max |a| = {max_abs}")));
    }
    Ok(max_abs / ((1u64 << bits) - 1) as f64)
}

/// Set every weight and activation step from the full-precision network
/// and copy batch-norm set 0 into every level.
pub fn init_from_fp(net: &mut Network, first_batch: &[f64], exec: Execution) -> Result<()> {
    let per: usize = net.input.iter().product();
    let [c, h, w] = net.input;
    let mut tape = Tape::new(exec);
    let mut x = tape.input(Tensor::new(first_batch.to_vec(), [first_batch.len() / per, c, h, w]));
    let top_bits = net.basic_bits + net.n as u32;
    for li in 0..net.layers.len() {
        if let NetLayer::Conv { weight, quant: Some(q), .. } = &net.layers[li] {
            let q = q.clone();
            let s_w = init_weight_step(&net.params[*weight].data, top_bits)
                .map_err(|e| Error::DegenerateInit(format!("layer {li}: {e}")))?;
            net.params[q.step].data[0] = s_w;
            let max_abs = tape.value(x).data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (lv, &a) in q.act_steps.iter().enumerate() {
                net.params[a].data[0] = init_act_step(max_abs, net.basic_bits + lv as u32)
                    .map_err(|e| Error::DegenerateInit(format!("layer {li} activations: {e}")))?;
            }
        }
        x = net.forward_range(&mut tape, x, li..li + 1, Precision::Full, Mode::Eval);
    }
    for l in &net.layers {
        if let NetLayer::BatchNorm { scale, shift, stats, .. } = l {
            for ids in [scale, shift] {
                for &id in &ids[1..] {
                    net.params[id].data = net.params[ids[0]].data.clone();
                }
            }
            for &s in &stats[1..] {
                net.stats[s] = net.stats[stats[0]].clone();
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let s = init_weight_step(&[0.1, -0.1, 0.1, -0.1], 4).unwrap();
        assert!((s - 0.2 / 15f64.sqrt()).abs() < 1e-15);
        assert!((s - 0.051640).abs() < 1e-6);
        assert_eq!(init_act_step(3.0, 2).unwrap(), 1.0);
        assert!(matches!(init_weight_step(&[0.0; 9], 4), Err(Error::DegenerateInit(_))));
    }
}
