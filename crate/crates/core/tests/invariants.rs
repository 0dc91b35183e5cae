use proptest::prelude::*;

use vlq::mixed::{allocate_bits, total_bits};
use vlq::model::LayerSpec;
use vlq::par::Execution;
use vlq::train::moo::{combine_us, solve_min_norm};
use vlq::train::net::{Mode, Precision};
use vlq::train::{BnMode, KdMode, Network, ParamKind, Tape, Tensor};

fn kd_network() -> Network {
    let spec = vec![
        LayerSpec::Conv { out: 2, kernel: 3, stride: 1, pad: 1, quantized: false },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Conv { out: 3, kernel: 3, stride: 1, pad: 1, quantized: true },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Linear { out: 4, quantized: false },
    ];
    let mut net = Network::build(&spec, [1, 4, 4], 2, 2, true, BnMode::Full, 3).unwrap();
    for p in &mut net.params {
        if p.kind == ParamKind::WeightStep || p.kind == ParamKind::ActStep {
            p.data = vec![0.05];
        }
    }
    net
}

/// Level-1 KD loss and its gradients, with the level-2 teacher recorded on the same tape.
fn student_kd(net: &mut Network, x: &[f64]) -> (f64, vlq::train::Grads) {
    let mut tape = Tape::new(Execution::Sequential);
    let inp = tape.input(Tensor::new(x.to_vec(), [2, 1, 4, 4]));
    let teacher = net.forward(&mut tape, inp, Precision::Level(2), Mode::Train);
    let teacher_logits = tape.value(teacher).data.clone();
    let student = net.forward(&mut tape, inp, Precision::Level(1), Mode::Train);
    let kd = tape.distill(student, &teacher_logits, KdMode::Cos);
    (tape.value(kd).scalar(), tape.backward(kd))
}

#[test]
fn kd_teacher_path_is_detached() {
    let mut net = kd_network();
    let x: Vec<f64> = (0..32).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.3).collect();
    let (base, grads) = student_kd(&mut net, &x);
    let teacher_only: Vec<usize> = net
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.name.contains("act2") || p.name.contains("bn2"))
        .map(|(i, _)| i)
        .collect();
    assert!(!teacher_only.is_empty());
    for &id in &teacher_only {
        assert!(grads.get(id).is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{}", net.params[id].name);
    }
    let shift = net.params.iter().position(|p| p.name.ends_with("bn2.shift")).unwrap();
    net.params[shift].data.iter_mut().for_each(|v| *v += 0.5);
    let (moved, _) = student_kd(&mut net, &x);
    assert_ne!(base, moved);
}

proptest! {
    #[test]
    fn us_weights_ignore_loss_magnitudes(losses in prop::collection::vec(-1e12f64..1e12, 1..9)) {
        let (_, alpha) = combine_us(&losses).unwrap();
        prop_assert!(alpha.iter().all(|&a| a == 1.0 / losses.len() as f64));
    }

    #[test]
    fn min_norm_beats_every_vertex(
        grads in (1usize..=16).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), 1..=4)),
    ) {
        let sol = solve_min_norm(&grads).unwrap();
        prop_assert!((sol.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(sol.alpha.iter().all(|&a| a >= 0.0));
        for g in &grads {
            prop_assert!(sol.norm_sq <= g.iter().map(|v| v * v).sum::<f64>() + 1e-9);
        }
    }

    #[test]
    fn allocation_respects_budget(
        rows in prop::collection::vec((1usize..400, 0.0f64..1.0, 0.0f64..1.0), 1..=6),
        frac in 0.0f64..=1.0,
    ) {
        let sizes: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let errors: Vec<Vec<f64>> = rows.iter().map(|&(_, a, b)| vec![a + b, b, 0.0]).collect();
        let lo = total_bits(&sizes, &vec![0; sizes.len()], 2);
        let hi = total_bits(&sizes, &vec![2; sizes.len()], 2);
        let budget = lo + ((hi - lo) as f64 * frac) as u64;
        let alloc = allocate_bits(&errors, &sizes, 2, 2, budget).unwrap();
        prop_assert!(alloc.total_bits <= budget);
        prop_assert!(alloc.objective <= errors.iter().map(|r| r[0]).sum::<f64>());
        if budget == hi {
            prop_assert_eq!(alloc.objective, 0.0);
        }
    }
}
