//! Joint training of every precision from one set of source parameters.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::infer::{accuracy, AssembledModel};
use crate::model::LayeredModel;
use crate::par::{map_indexed, Execution};
use crate::train::init::init_from_fp;
use crate::train::moo::{combine_us, solve_min_norm};
use crate::train::net::{Mode, Network, ParamGroup, ParamKind, Precision};
use crate::train::optim::{cosine_lr, Sgd};
use crate::train::{Grads, KdMode, ModelConfig, MooMode, Tape, Tensor, TrainConfig};

const EVAL_BATCH: usize = 500;
/// Floor applied to learned step sizes after each update.
pub const MIN_STEP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    /// `None` for the full-precision pass.
    pub level: Option<usize>,
    pub bits: Option<u32>,
    pub loss: f64,
    pub ce: f64,
    pub kd: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// Mean objective weight over the epoch.
    pub alpha: f64,
    /// Mean L2 norm of this level's gradient on the shared parameters.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub phase: String,
    pub epoch: usize,
    pub iter: usize,
    pub alpha: Vec<f64>,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// Squared norm of the combined shared gradient.
    pub norm_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum MetricRecord {
    Epoch(EpochRecord),
    Iter(IterRecord),
}

/// Execution mode, checkpoint location and metrics sink of a run.
pub struct RunContext<'a> {
    pub exec: Execution,
    /// Model file rewritten after every epoch, next to a `.state.json` sidecar.
    pub checkpoint: Option<&'a Path>,
    pub sink: &'a mut dyn FnMut(&MetricRecord) -> Result<()>,
}

/// Training-state sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: String,
    pub epoch: usize,
    pub seed: u64,
    pub network: Network,
    pub optimizer: Sgd,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub model: LayeredModel,
    pub records: Vec<EpochRecord>,
    /// Final test top-1 per level, when a test set was given.
    pub test_acc: Vec<Option<f64>>,
}

/// One stretch of training with a fixed set of precisions.
#[derive(Debug, Clone)]
pub(crate) struct Phase {
    pub name: String,
    /// Forward order; with distillation each entry learns from the previous.
    pub precisions: Vec<Precision>,
    pub kd: KdMode,
    pub moo: MooMode,
    pub epochs: usize,
    pub lr: f64,
    pub salt: u64,
}

#[derive(Debug, Default)]
struct StepStats {
    losses: Vec<f64>,
    ce: Vec<f64>,
    kd: Vec<f64>,
    correct: Vec<usize>,
    alpha: Vec<f64>,
    grad_norms: Vec<f64>,
    norm_sq: f64,
}

fn level_of(p: Precision, n: usize) -> usize {
    match p {
        Precision::Level(l) => l,
        Precision::Full => n + 1,
    }
}

pub fn state_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".state.json");
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn check_data(net: &Network, train: &Dataset) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train.shape != net.input {
        return Err(Error::Config(format!("dataset samples are {:?}, network expects {:?}", train.shape, net.input)));
    }
    if net.classes() != train.classes {
        return Err(Error::Config(format!("dataset has {} classes, network outputs {}", train.classes, net.classes())));
    }
    Ok(())
}

/// Full-precision pretraining followed by step-size initialization.
pub(crate) fn pretrain_and_init(
    net: &mut Network,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    ctx: &mut RunContext,
) -> Result<Vec<EpochRecord>> {
    let phase = Phase {
        name: "pretrain".into(),
        precisions: vec![Precision::Full],
        kd: KdMode::Off,
        moo: MooMode::Us,
        epochs: cfg.pretrain_epochs,
        lr: cfg.pretrain_lr,
        salt: 0x5052,
    };
    let records = run_phase(net, &phase, cfg, train, test, ctx)?;
    let order = train.epoch_order(cfg.seed, 0);
    let (x, _) = train.gather(&order[..cfg.batch_size.min(order.len())], None);
    init_from_fp(net, &x, ctx.exec)?;
    Ok(records)
}

/// Pretrain in full precision, initialize the step sizes, then train every
/// level jointly.
pub fn train_joint(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    ctx: &mut RunContext,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net =
        Network::build(&model.layers, model.input, model.basic_bits, model.n, model.compensation, cfg.bn, cfg.seed)?;
    net.grad_scale = cfg.grad_scale;
    check_data(&net, train)?;
    let mut records = pretrain_and_init(&mut net, cfg, train, test, ctx)?;
    let phase = Phase {
        name: "joint".into(),
        precisions: (0..=model.n).rev().map(Precision::Level).collect(),
        kd: cfg.kd,
        moo: cfg.moo,
        epochs: cfg.epochs,
        lr: cfg.lr,
        salt: 0x4A4F,
    };
    records.extend(run_phase(&mut net, &phase, cfg, train, test, ctx)?);
    let layered = net.to_layered()?;
    let test_acc = match test {
        Some(t) => (0..=model.n).map(|k| evaluate_model(&layered, k, t, ctx.exec).map(Some)).collect::<Result<_>>()?,
        None => vec![None; model.n + 1],
    };
    Ok(TrainOutcome { network: net, model: layered, records, test_acc })
}

/// Top-1 of `model` at uniform level `k` through the integer inference path.
pub fn evaluate_model(model: &LayeredModel, k: usize, data: &Dataset, exec: Execution) -> Result<f64> {
    let m = AssembledModel::uniform(model, k)?;
    let classes = m.num_classes();
    let mut correct = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.gather(chunk, None);
        let logits = m.forward(&x, exec)?;
        correct += accuracy(&logits, &y, classes).top1 * y.len() as f64;
    }
    Ok(correct / data.len().max(1) as f64)
}

/// Top-1 through the training graph in evaluation mode.
pub fn evaluate_network(net: &mut Network, prec: Precision, data: &Dataset, exec: Execution) -> f64 {
    let classes = net.classes();
    let mut correct = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.gather(chunk, None);
        let logits = net.eval_logits(&x, prec, exec);
        correct += accuracy(&logits, &y, classes).top1 * y.len() as f64;
    }
    correct / data.len().max(1) as f64
}

pub(crate) fn run_phase(
    net: &mut Network,
    phase: &Phase,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    ctx: &mut RunContext,
) -> Result<Vec<EpochRecord>> {
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay, net.params.iter().map(|p| p.data.len()));
    let k = phase.precisions.len();
    let iters = train.len().div_ceil(cfg.batch_size);
    let seed = cfg.seed ^ phase.salt.rotate_left(32);
    let mut records = Vec::new();
    for epoch in 0..phase.epochs {
        let order = train.epoch_order(seed, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64).wrapping_mul(0xD134_2543_DE82_EF95));
        let mut sum = StepStats {
            losses: vec![0.0; k],
            ce: vec![0.0; k],
            kd: vec![0.0; k],
            correct: vec![0; k],
            alpha: vec![0.0; k],
            grad_norms: vec![0.0; k],
            norm_sq: 0.0,
        };
        let mut lr = phase.lr;
        for (it, idx) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_lr(phase.lr, epoch as f64 + it as f64 / iters as f64, phase.epochs as f64);
            let (x, y) = train.gather(idx, Some(&mut rng));
            let s = train_step(net, &mut opt, phase, &x, &y, lr, epoch, ctx.exec)?;
            for i in 0..k {
                sum.losses[i] += s.losses[i];
                sum.ce[i] += s.ce[i];
                sum.kd[i] += s.kd[i];
                sum.correct[i] += s.correct[i];
                sum.alpha[i] += s.alpha[i];
                sum.grad_norms[i] += s.grad_norms[i];
            }
            if phase.moo == MooMode::Mgd {
                (ctx.sink)(&MetricRecord::Iter(IterRecord {
                    phase: phase.name.clone(),
                    epoch,
                    iter: it,
                    alpha: s.alpha,
                    losses: s.losses,
                    grad_norms: s.grad_norms,
                    norm_sq: s.norm_sq,
                }))?;
            }
        }
        let layered = if phase.precisions.iter().all(|p| matches!(p, Precision::Level(_))) {
            net.to_layered().ok()
        } else {
            None
        };
        for (i, &p) in phase.precisions.iter().enumerate() {
            let test_acc = match (test, p, &layered) {
                (Some(t), Precision::Level(l), Some(m)) => Some(evaluate_model(m, l, t, ctx.exec)?),
                (Some(t), _, _) => Some(evaluate_network(net, p, t, ctx.exec)),
                (None, _, _) => None,
            };
            let it = iters as f64;
            let rec = EpochRecord {
                phase: phase.name.clone(),
                epoch,
                level: match p {
                    Precision::Level(l) => Some(l),
                    Precision::Full => None,
                },
                bits: match p {
                    Precision::Level(l) => Some(net.basic_bits + l as u32),
                    Precision::Full => None,
                },
                loss: sum.losses[i] / it,
                ce: sum.ce[i] / it,
                kd: sum.kd[i] / it,
                train_acc: sum.correct[i] as f64 / train.len() as f64,
                test_acc,
                alpha: sum.alpha[i] / it,
                grad_norm: sum.grad_norms[i] / it,
                lr,
            };
            (ctx.sink)(&MetricRecord::Epoch(rec.clone()))?;
            records.push(rec);
        }
        if let Some(path) = ctx.checkpoint {
            if let Some(m) = &layered {
                write_atomic(path, &codec::encode_to_vec(m)?)?;
            }
            let state = TrainState {
                phase: phase.name.clone(),
                epoch,
                seed: cfg.seed,
                network: net.clone(),
                optimizer: opt.clone(),
            };
            let json = serde_json::to_vec(&state).map_err(|e| Error::invalid(e.to_string()))?;
            write_atomic(&state_path(path), &json)?;
        }
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    net: &mut Network,
    opt: &mut Sgd,
    phase: &Phase,
    x: &[f64],
    y: &[u8],
    lr: f64,
    epoch: usize,
    exec: Execution,
) -> Result<StepStats> {
    let [c, h, w] = net.input;
    let b = y.len();
    let classes = net.classes();
    let mut tape = Tape::new(exec);
    let inp = tape.input(Tensor::new(x.to_vec(), [b, c, h, w]));
    let all_levels = phase.precisions.iter().all(|p| matches!(p, Precision::Level(_)));
    let prefix = if all_levels { net.shared_prefix() } else { 0 };
    let shared = net.forward_range(&mut tape, inp, 0..prefix, phase.precisions[0], Mode::Train);
    let depth = net.layers.len();
    let mut stats = StepStats::default();
    let mut loss_nodes = Vec::with_capacity(phase.precisions.len());
    let mut teacher: Option<Vec<f64>> = None;
    for &p in &phase.precisions {
        let out = net.forward_range(&mut tape, shared, prefix..depth, p, Mode::Train);
        let logits = tape.value(out).data.clone();
        let ce = tape.cross_entropy(out, y);
        let mut loss = ce;
        let mut kd = 0.0;
        if let (Some(t), true) = (&teacher, phase.kd != KdMode::Off) {
            let node = tape.distill(out, t, phase.kd);
            kd = tape.value(node).scalar();
            loss = tape.add(ce, node);
        }
        let value = tape.value(loss).scalar();
        if !value.is_finite() {
            return Err(Error::Divergence { level: level_of(p, net.n), epoch });
        }
        stats.losses.push(value);
        stats.ce.push(tape.value(ce).scalar());
        stats.kd.push(kd);
        stats.correct.push((accuracy(&logits, y, classes).top1 * b as f64).round() as usize);
        loss_nodes.push(loss);
        teacher = Some(logits);
    }
    let grads: Vec<Grads> = map_indexed(exec, loss_nodes.len(), |i| tape.backward(loss_nodes[i]));

    let shared_ids: Vec<usize> =
        (0..net.params.len()).filter(|&i| net.params[i].group == ParamGroup::Shared && !net.params[i].frozen).collect();
    let flat: Vec<Vec<f64>> = grads
        .iter()
        .map(|g| {
            shared_ids
                .iter()
                .flat_map(|&id| match g.get(id) {
                    Some(v) => v.to_vec(),
                    None => vec![0.0; net.params[id].data.len()],
                })
                .collect()
        })
        .collect();
    stats.grad_norms = flat.iter().map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let k = flat.len();
    let dim = flat[0].len();
    stats.alpha = match phase.moo {
        MooMode::Mgd if k > 1 && dim > 0 => {
            let r = solve_min_norm(&flat)?;
            stats.norm_sq = r.norm_sq;
            r.alpha
        }
        _ => combine_us(&stats.losses)?.1,
    };
    if phase.moo == MooMode::Us || k == 1 || dim == 0 {
        stats.norm_sq = (0..dim).map(|j| (0..k).map(|i| stats.alpha[i] * flat[i][j]).sum::<f64>().powi(2)).sum();
    }

    for id in 0..net.params.len() {
        let (kind, group, frozen, len) = {
            let p = &net.params[id];
            (p.kind, p.group, p.frozen, p.data.len())
        };
        if frozen {
            continue;
        }
        let mut g = vec![0.0; len];
        let mut touched = false;
        for (i, gr) in grads.iter().enumerate() {
            if let Some(gi) = gr.get(id) {
                touched = true;
                let a = if group == ParamGroup::Shared { stats.alpha[i] } else { 1.0 };
                g.iter_mut().zip(gi).for_each(|(acc, v)| *acc += a * v);
            }
        }
        if !touched {
            continue;
        }
        let data = &mut net.params[id].data;
        opt.step(id, data, &g, lr, kind == ParamKind::Weight);
        if matches!(kind, ParamKind::WeightStep | ParamKind::ActStep) {
            data.iter_mut().for_each(|s| *s = s.max(MIN_STEP));
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, Split};
    use crate::model::LayerSpec;
    use crate::train::BnMode;

    fn toy(n: usize) -> ModelConfig {
        ModelConfig {
            input: [1, 4, 4],
            layers: vec![
                LayerSpec::Conv { out: 4, kernel: 3, stride: 1, pad: 1, quantized: false },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Conv { out: 4, kernel: 3, stride: 1, pad: 1, quantized: true },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { out: 2, quantized: false },
            ],
            basic_bits: 2,
            n,
            compensation: true,
        }
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            pretrain_epochs: 2,
            batch_size: 16,
            lr: 0.05,
            pretrain_lr: 0.05,
            ..TrainConfig::default()
        }
    }

    fn run(
        model: &ModelConfig,
        cfg: &TrainConfig,
        data: &Dataset,
        exec: Execution,
    ) -> (TrainOutcome, Vec<MetricRecord>) {
        let mut recs = Vec::new();
        let mut sink = |r: &MetricRecord| {
            recs.push(r.clone());
            Ok(())
        };
        let mut ctx = RunContext { exec, checkpoint: None, sink: &mut sink };
        let out = train_joint(model, cfg, data, Some(data), &mut ctx).unwrap();
        (out, recs)
    }

    #[test]
    fn separable_toy_reaches_full_accuracy_at_every_level() {
        let data = synthetic(128, [1, 4, 4], 2, 0.3, 5, Split::Train);
        let (out, _) = run(&toy(2), &cfg(6), &data, Execution::default());
        for (k, acc) in out.test_acc.iter().enumerate() {
            assert_eq!(acc.unwrap(), 1.0, "level {k}");
        }
    }

    #[test]
    fn deterministic_and_execution_independent() {
        let data = synthetic(64, [1, 4, 4], 2, 0.5, 3, Split::Train);
        let mut c = cfg(2);
        c.moo = MooMode::Mgd;
        let (a, ra) = run(&toy(2), &c, &data, Execution::Sequential);
        let (b, rb) = run(&toy(2), &c, &data, Execution::default());
        assert_eq!(a.network, b.network);
        assert_eq!(ra, rb);
        assert!(ra.iter().any(|r| matches!(r, MetricRecord::Iter(i) if i.alpha.len() == 3)));
    }

    #[test]
    fn single_level_matches_dedicated_qat() {
        let data = synthetic(48, [1, 4, 4], 2, 0.5, 4, Split::Train);
        let (a, _) = run(&toy(0), &cfg(2), &data, Execution::Sequential);
        let mut c = cfg(2);
        c.kd = KdMode::Off;
        c.moo = MooMode::Mgd;
        let (b, _) = run(&toy(0), &c, &data, Execution::Sequential);
        assert_eq!(a.network, b.network);
    }

    #[test]
    fn export_matches_training_graph_bit_exactly() {
        let data = synthetic(40, [1, 4, 4], 2, 0.5, 8, Split::Train);
        let mut c = cfg(1);
        c.bn = BnMode::Stats;
        let (out, _) = run(&toy(2), &c, &data, Execution::Sequential);
        let (x, _) = data.gather(&(0..data.len()).collect::<Vec<_>>(), None);
        let mut rounded = out.network.rounded();
        for k in 0..=2 {
            let graph = rounded.eval_logits(&x, Precision::Level(k), Execution::Sequential);
            let infer = AssembledModel::uniform(&out.model, k).unwrap().forward(&x, Execution::Sequential).unwrap();
            assert_eq!(graph, infer, "level {k}");
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let data = synthetic(8, [1, 5, 5], 2, 0.5, 1, Split::Train);
        let mut sink = |_: &MetricRecord| Ok(());
        let mut ctx = RunContext { exec: Execution::Sequential, checkpoint: None, sink: &mut sink };
        assert!(matches!(train_joint(&toy(1), &cfg(1), &data, None, &mut ctx), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.vlq");
        let data = synthetic(32, [1, 4, 4], 2, 0.5, 2, Split::Train);
        let mut sink = |_: &MetricRecord| Ok(());
        let mut ctx = RunContext { exec: Execution::Sequential, checkpoint: Some(&path), sink: &mut sink };
        let out = train_joint(&toy(1), &cfg(1), &data, None, &mut ctx).unwrap();
        assert_eq!(codec::decode_bytes(&std::fs::read(&path).unwrap()).unwrap(), out.model);
        let state: TrainState = serde_json::from_slice(&std::fs::read(state_path(&path)).unwrap()).unwrap();
        assert_eq!((state.phase.as_str(), state.epoch), ("joint", 0));
    }
}
