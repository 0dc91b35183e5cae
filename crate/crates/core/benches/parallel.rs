use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use vlq::data::{synthetic, Split};
use vlq::infer::AssembledModel;
use vlq::mixed::layer_error_table;
use vlq::model::preset;
use vlq::par::Execution;
use vlq::train::init::init_from_fp;
use vlq::train::net::{Mode, Precision};
use vlq::train::{BnMode, Network, Tape, Tensor};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];
const BATCH: usize = 64;

fn network() -> (Network, Vec<f64>, Vec<u8>) {
    let (input, layers) = preset("mnist_small").unwrap();
    let mut net = Network::build(&layers, input, 2, 2, true, BnMode::Full, 1).unwrap();
    let data = synthetic(BATCH, input, 10, 1.0, 1, Split::Train);
    let idx: Vec<usize> = (0..BATCH).collect();
    let (x, y) = data.gather(&idx, None);
    init_from_fp(&mut net, &x, Execution::Sequential).unwrap();
    (net, x, y)
}

fn bench_forward(c: &mut Criterion) {
    let (net, x, _) = network();
    let model = AssembledModel::uniform(&net.to_layered().unwrap(), 2).unwrap();
    let mut group = c.benchmark_group("integer_forward_batch64");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| model.forward(&x, exec).unwrap());
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let (net, x, y) = network();
    let [ch, h, w] = net.input;
    let mut group = c.benchmark_group("train_step_batch64");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            let mut net = net.clone();
            b.iter(|| {
                let mut tape = Tape::new(exec);
                let inp = tape.input(Tensor::new(x.clone(), [BATCH, ch, h, w]));
                let out = net.forward(&mut tape, inp, Precision::Level(0), Mode::Train);
                let loss = tape.cross_entropy(out, &y);
                tape.backward(loss)
            });
        });
    }
    group.finish();
}

fn bench_error_table(c: &mut Criterion) {
    let (net, _, _) = network();
    let model = net.to_layered().unwrap();
    let mut group = c.benchmark_group("layer_error_table");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| layer_error_table(&model, exec).unwrap());
        });
    }
    group.finish();
}

fn criterion_config() -> Criterion {
    Criterion::default().warm_up_time(Duration::from_secs(1)).measurement_time(Duration::from_secs(3)).sample_size(10)
}

criterion_group!(
    name = benches;
    config = criterion_config();
    targets = bench_forward, bench_train_step, bench_error_table
);
criterion_main!(benches);
