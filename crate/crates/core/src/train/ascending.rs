//! Stage-wise baseline: train the basic level, then learn one enhance plane
//! per stage through a real-valued carrier with everything below frozen.

use crate::data::Dataset;
use crate::error::Result;
use crate::train::joint::evaluate_model;
use crate::train::joint::{check_data, pretrain_and_init, run_phase, Phase, RunContext, TrainOutcome};
use crate::train::net::{CarrierSlot, NetLayer, Network, ParamKind, Precision};
use crate::train::{KdMode, ModelConfig, MooMode, TrainConfig};

#[derive(Debug, Clone)]
pub struct AscendingOutcome {
    pub outcome: TrainOutcome,
    /// `[stage][quantized layer]` integer weights fixed at the end of each stage.
    pub stage_weights: Vec<Vec<Vec<i32>>>,
}

/// Bit chosen by a carrier value: `1` when `r ≥ 0`.
pub fn carrier_bit(r: f64) -> i32 {
    (r >= 0.0) as i32
}

/// Carrier start value placing the decision threshold halfway between
/// `2·base` and `2·base + 1` at step `s_i`.
pub fn carrier_init(w: f64, base: i32, s_i: f64) -> f64 {
    w - (2.0 * base as f64 + 0.5) * s_i
}

fn stage(name: String, level: usize, cfg: &TrainConfig) -> Phase {
    Phase {
        name,
        precisions: vec![Precision::Level(level)],
        kd: KdMode::Off,
        moo: MooMode::Us,
        epochs: cfg.epochs,
        lr: cfg.lr,
        salt: 0x4153 + level as u64,
    }
}

/// Ascending-layer baseline with `cfg.epochs` epochs per stage. Exported
/// without compensation.
pub fn train_ascending(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    ctx: &mut RunContext,
) -> Result<AscendingOutcome> {
    cfg.validate()?;
    let mut net = Network::build(&model.layers, model.input, model.basic_bits, model.n, false, cfg.bn, cfg.seed)?;
    net.grad_scale = cfg.grad_scale;
    check_data(&net, train)?;
    let mut records = pretrain_and_init(&mut net, cfg, train, test, ctx)?;
    records.extend(run_phase(&mut net, &stage("ascending0".into(), 0, cfg), cfg, train, test, ctx)?);

    let qlayers: Vec<usize> = net.quantized_layers().map(|(i, ..)| i).collect();
    let current = |net: &Network, level: usize| -> Vec<Vec<i32>> {
        net.quantized_layers().map(|(_, _, w, q)| net.level_weights(w, q, level).0).collect()
    };
    let mut stage_weights = vec![current(&net, 0)];
    for p in &mut net.params {
        if matches!(p.kind, ParamKind::Weight | ParamKind::Bias | ParamKind::WeightStep) {
            p.frozen = true;
        }
    }

    for level in 1..=net.n {
        let base = stage_weights.last().expect("stage 0 recorded").clone();
        for (m, &li) in qlayers.iter().enumerate() {
            let NetLayer::Conv { weight, quant: Some(q), .. } = &net.layers[li] else { unreachable!() };
            let (weight, step) = (*weight, q.step);
            if let Some(old) = &q.carrier {
                net.params[old.carrier].frozen = true;
            }
            let s_i = net.params[step].data[0] * (1u64 << (net.n - level)) as f64;
            let r = net.params[weight].data.iter().zip(&base[m]).map(|(&w, &b)| carrier_init(w, b, s_i)).collect();
            let carrier = net.param(format!("{li}.carrier{level}"), ParamKind::Carrier, r);
            let NetLayer::Conv { quant: Some(q), .. } = &mut net.layers[li] else { unreachable!() };
            q.carrier = Some(CarrierSlot { base: base[m].clone(), carrier, step: s_i });
        }
        records.extend(run_phase(&mut net, &stage(format!("ascending{level}"), level, cfg), cfg, train, test, ctx)?);
        stage_weights.push(current(&net, level));
    }

    let layered = net.to_layered()?;
    let test_acc = match test {
        Some(t) => (0..=net.n).map(|k| evaluate_model(&layered, k, t, ctx.exec).map(Some)).collect::<Result<_>>()?,
        None => vec![None; net.n + 1],
    };
    Ok(AscendingOutcome { outcome: TrainOutcome { network: net, model: layered, records, test_acc }, stage_weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, Split};
    use crate::infer::AssembledLayer;
    use crate::infer::AssembledModel;
    use crate::model::LayerSpec;
    use crate::par::Execution;
    use crate::train::joint::MetricRecord;

    #[test]
    fn carrier_mapping() {
        assert_eq!(carrier_bit(0.0), 1);
        assert_eq!(carrier_bit(2.5), 1);
        assert_eq!(carrier_bit(-1e-12), 0);
        // w exactly at 2·base + 0.5 steps sits on the threshold
        assert_eq!(carrier_init(1.25, 1, 0.5), 0.0);
    }

    #[test]
    fn lower_levels_stay_frozen() {
        let model = ModelConfig {
            input: [1, 4, 4],
            layers: vec![
                LayerSpec::Conv { out: 3, kernel: 3, stride: 1, pad: 1, quantized: false },
                LayerSpec::Relu,
                LayerSpec::Conv { out: 3, kernel: 3, stride: 1, pad: 1, quantized: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear { out: 2, quantized: false },
            ],
            basic_bits: 2,
            n: 2,
            compensation: true,
        };
        let cfg = TrainConfig { epochs: 2, pretrain_epochs: 1, batch_size: 8, ..TrainConfig::default() };
        let data = synthetic(32, [1, 4, 4], 2, 0.5, 6, Split::Train);
        let mut sink = |_: &MetricRecord| Ok(());
        let mut ctx = RunContext { exec: Execution::Sequential, checkpoint: None, sink: &mut sink };
        let out = train_ascending(&model, &cfg, &data, Some(&data), &mut ctx).unwrap();
        assert!(!out.outcome.model.compensation);
        assert_eq!(out.stage_weights.len(), 3);
        for (k, stage) in out.stage_weights.iter().enumerate() {
            let m = AssembledModel::uniform(&out.outcome.model, k).unwrap();
            let w: Vec<&Vec<i32>> = m
                .layers
                .iter()
                .filter_map(|l| match l {
                    AssembledLayer::QConv { weight, .. } => Some(&weight.data),
                    _ => None,
                })
                .collect();
            assert_eq!(w, stage.iter().collect::<Vec<_>>(), "level {k}");
        }
    }
}
