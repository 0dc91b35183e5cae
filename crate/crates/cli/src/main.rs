//! `vlq`: train, assemble, evaluate, mix and inspect vertical-layered models.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use vlq::codec::{self, ModelSource};
use vlq::config::{RunConfig, TrainMode};
use vlq::data::{self, Dataset, DatasetName, Split};
use vlq::infer::{accuracy, AssembledModel};
use vlq::metrics::JsonLines;
use vlq::mixed::{self, MixedPlan};
use vlq::model::LayeredModel;
use vlq::par::Execution;
use vlq::train::joint::state_path;
use vlq::train::{self, BnMode, KdMode, MetricRecord, MooMode, RunContext};
use vlq::Error;

#[derive(Parser)]
#[command(name = "vlq", version, about = "Vertical-layered quantized networks")]
struct Cli {
    /// Run batch loops sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write it with its metrics.
    Train(TrainArgs),
    /// Decode a model up to a bit width and report the bytes consumed.
    Assemble(AssembleArgs),
    /// Top-1/top-5 accuracy at a bit width or under a mixed plan.
    Eval(EvalArgs),
    /// Per-layer bit allocation under a weight-bit budget.
    Mix(MixArgs),
    /// Per-layer, per-level weight histograms as tab-separated text.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Moo {
    Us,
    Mgd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kd {
    Off,
    Cos,
    Kl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bn {
    Shared,
    Stats,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Joint,
    Ascending,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    moo: Option<Moo>,
    #[arg(long, value_enum)]
    kd: Option<Kd>,
    #[arg(long, value_enum)]
    bn: Option<Bn>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Model file; a `.ckpt` checkpoint and its `.ckpt.state.json` sit next to it.
    #[arg(long, default_value = "model.vlq")]
    out: PathBuf,
    /// Metrics file (default: `<out>.metrics.jsonl`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write each enhance level to its own `<out>.e<i>` file.
    #[arg(long)]
    split: bool,
}

#[derive(Args)]
struct AssembleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Target weight bit width (basic bits plus enhance levels).
    #[arg(long)]
    bits: u32,
    /// Write a self-contained file holding only the needed sections.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Run configuration whose `[data]` section names the dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<DataName>,
    /// Dataset directory (default: `$VLQ_DATA_DIR`).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use at most this many samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataName {
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Weight bit width (default: top).
    #[arg(long)]
    bits: Option<u32>,
    /// Mixed-precision plan written by `mix --out`.
    #[arg(long, conflicts_with = "bits")]
    plan: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    model: PathBuf,
    /// Total weight-bit budget.
    #[arg(long, required_unless_present = "sweep")]
    budget_bits: Option<u64>,
    /// Evaluate evenly spaced budgets from all-basic to all-top.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value_t = 9)]
    steps: usize,
    /// Calibration samples drawn from the training split.
    #[arg(long, default_value_t = 2000)]
    calib: usize,
    /// Plan file with the allocation and recalibrated statistics.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Emit per-layer statistics instead of histograms.
    #[arg(long)]
    stats: bool,
}

/// Exit status with a message.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Divergence { .. } => 3,
            Error::CorruptData(_) | Error::MissingLayers { .. } | Error::Consistency(_) | Error::Io(_) => 4,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

type Out = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a, exec),
        Cmd::Assemble(a) => cmd_assemble(a),
        Cmd::Eval(a) => cmd_eval(a, exec),
        Cmd::Mix(a) => cmd_mix(a, exec),
        Cmd::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("vlq: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn print_json(v: &serde_json::Value) -> Out {
    let mut out = io::stdout().lock();
    writeln!(out, "{v}")?;
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(a: TrainArgs, exec: Execution) -> Out {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = a.moo {
        cfg.train.moo = match m {
            Moo::Us => MooMode::Us,
            Moo::Mgd => MooMode::Mgd,
        };
    }
    if let Some(k) = a.kd {
        cfg.train.kd = match k {
            Kd::Off => KdMode::Off,
            Kd::Cos => KdMode::Cos,
            Kd::Kl => KdMode::Kl,
        };
    }
    if let Some(b) = a.bn {
        cfg.train.bn = match b {
            Bn::Shared => BnMode::Shared,
            Bn::Stats => BnMode::Stats,
            Bn::Full => BnMode::Full,
        };
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            Mode::Joint => TrainMode::Joint,
            Mode::Ascending => TrainMode::Ascending,
        };
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let model_cfg = cfg.model.resolve()?;
    let train_set = cfg.load_split(Split::Train)?;
    let test_set = cfg.load_split(Split::Test)?;

    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.jsonl"));
    let mut metrics = JsonLines::create(&metrics_path)?;
    let ckpt = with_suffix(&a.out, ".ckpt");
    let mut sink = |r: &MetricRecord| {
        metrics.write(r)?;
        metrics.flush()
    };
    let mut ctx = RunContext { exec, checkpoint: Some(&ckpt), sink: &mut sink };
    let outcome = match cfg.mode {
        TrainMode::Joint => train::train_joint(&model_cfg, &cfg.train, &train_set, Some(&test_set), &mut ctx),
        TrainMode::Ascending => {
            train::train_ascending(&model_cfg, &cfg.train, &train_set, Some(&test_set), &mut ctx).map(|o| o.outcome)
        }
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ Error::Divergence { .. }) => {
            return Err(Failure { code: 3, msg: format!("{e}; last checkpoint kept at {}", ckpt.display()) });
        }
        Err(e) => return Err(e.into()),
    };
    let enc = if a.split {
        codec::write_split(&outcome.model, &a.out)?
    } else {
        let enc = codec::encode_parts(&outcome.model)?;
        std::fs::write(&a.out, enc.to_bytes())?;
        enc
    };
    print_json(&json!({
        "record": "summary",
        "model": a.out,
        "metrics": metrics_path,
        "state": state_path(&ckpt),
        "bits": (0..=outcome.model.n).map(|k| outcome.model.basic_bits + k as u32).collect::<Vec<_>>(),
        "test_acc": outcome.test_acc,
        "sections": enc.sizes(),
    }))
}

fn level_for(model: &LayeredModel, bits: u32) -> Result<usize, Failure> {
    let top = model.basic_bits + model.n as u32;
    if bits < model.basic_bits || bits > top {
        return Err(usage(format!("--bits {bits} outside {}..={top}", model.basic_bits)));
    }
    Ok((bits - model.basic_bits) as usize)
}

fn header(source: &ModelSource) -> Result<LayeredModel, Failure> {
    Ok(codec::decode_levels(source, 0)?.model)
}

fn cmd_assemble(a: AssembleArgs) -> Out {
    let source = ModelSource::open(&a.model)?;
    let k = level_for(&header(&source)?, a.bits)?;
    let decoded = codec::decode_levels(&source, k)?;
    AssembledModel::from_layered(&decoded.model, &vec![k; decoded.model.quantized_layers().count()])?;
    let consumed = codec::bytes_for_level(&decoded.model, k);
    if let Some(out) = &a.out {
        std::fs::write(out, codec::extract_levels(&source, k)?)?;
    }
    let sections: Vec<_> = codec::section_sizes(&decoded.model).into_iter().take(k + 1).collect();
    print_json(&json!({
        "record": "assemble",
        "bits": a.bits,
        "level": k,
        "bytes_consumed": consumed,
        "sections": sections,
    }))
}

fn load_eval_data(d: &DataArgs, model: &LayeredModel, split: Split) -> Result<Option<Dataset>, Failure> {
    let mut set = if let Some(path) = &d.config {
        let mut cfg = RunConfig::load(path)?;
        if d.data_dir.is_some() {
            cfg.data.root = d.data_dir.clone();
        }
        cfg.data.augment = false;
        cfg.load_split(split)?
    } else {
        match d.dataset {
            None => return Ok(None),
            Some(DataName::Synthetic) => {
                let classes = model.num_classes()?;
                data::synthetic(d.limit.unwrap_or(1000), model.input, classes, 1.0, d.seed, split)
            }
            Some(name) => {
                let name = match name {
                    DataName::Mnist => DatasetName::Mnist,
                    _ => DatasetName::Cifar10,
                };
                data::load_dataset(name, split, &data::data_root(d.data_dir.as_deref())?, false)?
            }
        }
    };
    if let Some(l) = d.limit {
        set.truncate(l);
    }
    if set.shape != model.input {
        return Err(usage(format!("dataset samples are {:?}, model expects {:?}", set.shape, model.input)));
    }
    if set.classes != model.num_classes()? {
        return Err(usage(format!("dataset has {} classes, model outputs {}", set.classes, model.num_classes()?)));
    }
    Ok(Some(set))
}

fn evaluate(m: &AssembledModel, set: &Dataset, exec: Execution) -> Result<vlq::infer::Accuracy, Failure> {
    let classes = m.num_classes();
    let mut logits = Vec::with_capacity(set.len() * classes);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(500) {
        let (x, _) = set.gather(chunk, None);
        logits.extend(m.forward(&x, exec)?);
    }
    Ok(accuracy(&logits, &set.labels, classes))
}

fn cmd_eval(a: EvalArgs, exec: Execution) -> Out {
    let source = ModelSource::open(&a.model)?;
    let head = header(&source)?;
    let set = load_eval_data(&a.data, &head, Split::Test)?.ok_or_else(|| usage("eval needs --config or --dataset"))?;
    let (m, level) = match &a.plan {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let plan: MixedPlan =
                serde_json::from_str(&text).map_err(|e| usage(format!("bad plan {}: {e}", p.display())))?;
            let model = codec::decode_full(&source)?;
            (plan.assemble(&model)?, None)
        }
        None => {
            let k = match a.bits {
                Some(b) => level_for(&head, b)?,
                None => head.n,
            };
            (codec::decode_at_precision(&source, k)?, Some(k))
        }
    };
    let acc = evaluate(&m, &set, exec)?;
    print_json(&json!({
        "record": "eval",
        "level": level,
        "bits": level.map(|k| head.basic_bits + k as u32),
        "levels": m.levels,
        "top1": acc.top1,
        "top5": acc.top5,
        "count": acc.count,
    }))
}

fn cmd_mix(a: MixArgs, exec: Execution) -> Out {
    let source = ModelSource::open(&a.model)?;
    let model = codec::decode_full(&source)?;
    let errors = mixed::layer_error_table(&model, exec)?;
    let sizes = mixed::layer_sizes(&model);
    let calib = load_eval_data(&a.data, &model, Split::Train)?.map(|mut d| {
        d.truncate(a.calib);
        d
    });
    let test = if calib.is_some() { load_eval_data(&a.data, &model, Split::Test)? } else { None };

    let budgets: Vec<u64> = if a.sweep {
        let lo = mixed::total_bits(&sizes, &vec![0; sizes.len()], model.basic_bits);
        let hi = mixed::total_bits(&sizes, &vec![model.n; sizes.len()], model.basic_bits);
        let steps = a.steps.max(2) as u64;
        (0..steps).map(|i| lo + (hi - lo) * i / (steps - 1)).collect()
    } else {
        vec![a.budget_bits.expect("required unless sweep")]
    };
    let mut out = JsonLines::new(io::stdout().lock());
    let mut last_plan = None;
    for budget in budgets {
        let alloc = mixed::allocate_bits(&errors, &sizes, model.basic_bits, model.n, budget)?;
        if !a.sweep {
            for c in mixed::allocation_report(&model, &alloc, &errors) {
                out.write(&json!({"record": "layer", "budget": budget, "choice": c}))?;
            }
        }
        let mut assembled = AssembledModel::from_layered(&model, &alloc.levels)?;
        if let Some(c) = &calib {
            assembled = mixed::recalibrate_bn(&assembled, c, exec)?;
        }
        let top1 = match &test {
            Some(t) => Some(evaluate(&assembled, t, exec)?.top1),
            None => None,
        };
        out.write(&json!({
            "record": "allocation",
            "budget": budget,
            "total_bits": alloc.total_bits,
            "objective": alloc.objective,
            "levels": alloc.levels,
            "recalibrated": calib.is_some(),
            "top1": top1,
        }))?;
        last_plan = Some(MixedPlan::from_model(alloc, &assembled));
    }
    out.flush()?;
    if let (Some(path), Some(plan)) = (&a.out, last_plan) {
        std::fs::write(path, serde_json::to_vec_pretty(&plan).map_err(|e| usage(e.to_string()))?)?;
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Out {
    let source = ModelSource::open(&a.model)?;
    let model = codec::decode_full(&source)?;
    let mut out = io::BufWriter::new(io::stdout().lock());
    if a.stats {
        writeln!(out, "layer\tlevel\tbits\telements\tstep\tmin\tmax\tmean_abs\tzero_fraction")?;
    } else {
        writeln!(out, "layer\tlevel\tbits\tvalue\tcount")?;
    }
    for (layer, stack) in model.quantized_layers() {
        for k in 0..=stack.n() {
            let w = stack.assemble(k)?;
            if a.stats {
                let n = w.data.len().max(1) as f64;
                let min = w.data.iter().min().copied().unwrap_or(0);
                let max = w.data.iter().max().copied().unwrap_or(0);
                let mean_abs = w.data.iter().map(|v| v.unsigned_abs() as f64).sum::<f64>() / n;
                let zeros = w.data.iter().filter(|&&v| v == 0).count() as f64 / n;
                writeln!(
                    out,
                    "{layer}\t{k}\t{}\t{}\t{}\t{min}\t{max}\t{mean_abs}\t{zeros}",
                    w.bits(),
                    w.data.len(),
                    w.step()
                )?;
            } else {
                let mut hist = BTreeMap::new();
                for &v in &w.data {
                    *hist.entry(v).or_insert(0usize) += 1;
                }
                for (v, c) in hist {
                    writeln!(out, "{layer}\t{k}\t{}\t{v}\t{c}", w.bits())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}
