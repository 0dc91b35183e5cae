use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMOKE: &str = r#"
[data]
dataset = "synthetic"
synthetic_train = 160
synthetic_test = 1000
synthetic_classes = 10
synthetic_noise = 0.5

[model]
input = [1, 6, 6]
n = 2
layers = [
  { kind = "conv", out = 4, kernel = 3, stride = 1, pad = 1, quantized = false },
  { kind = "batch_norm" },
  { kind = "relu" },
  { kind = "conv", out = 6, kernel = 3, stride = 1, pad = 1, quantized = true },
  { kind = "batch_norm" },
  { kind = "relu" },
  { kind = "max_pool", size = 2 },
  { kind = "flatten" },
  { kind = "linear", out = 10, quantized = false },
]

[train]
epochs = 2
pretrain_epochs = 1
batch_size = 32
seed = 3
"#;

fn vlq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlq")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, SMOKE.replace("[train]", &format!("[train]\n{extra}"))).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, cfg: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["train", "--config", s(cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = vlq(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = train(dir.path(), &cfg, "a.vlq", &["--seed", "7"]);
    let b = train(dir.path(), &cfg, "b.vlq", &["--seed", "7"]);
    let metrics = |p: &Path| std::fs::read(format!("{}.metrics.jsonl", p.display())).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = train(dir.path(), &cfg, "c.vlq", &["--seed", "8"]);
    assert_ne!(metrics(&a), metrics(&c));
}

#[test]
fn mgd_emits_per_iteration_alphas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let m = train(dir.path(), &cfg, "m.vlq", &["--moo", "mgd", "--kd", "kl", "--bn", "stats"]);
    let text = std::fs::read_to_string(format!("{}.metrics.jsonl", m.display())).unwrap();
    let iters: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["record"] == "iter")
        .collect();
    // 160 samples in batches of 32 over 2 joint epochs
    assert_eq!(iters.len(), 10);
    for it in iters {
        let alpha: Vec<f64> = serde_json::from_value(it["alpha"].clone()).unwrap();
        assert_eq!(alpha.len(), 3);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(alpha.iter().all(|&a| a >= 0.0));
    }
}

#[test]
fn config_and_dataset_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\narch = \"mnist_small\"\nunknown = 1\n").unwrap();
    assert_eq!(code(&vlq(&["train", "--config", s(&bad)])), 2);

    let missing = dir.path().join("mnist.toml");
    std::fs::write(
        &missing,
        format!(
            "[data]\ndataset = \"mnist\"\nroot = \"{}\"\n[model]\narch = \"mnist_small\"\n",
            s(&dir.path().join("nowhere"))
        ),
    )
    .unwrap();
    let o = vlq(&["train", "--config", s(&missing), "--out", s(&dir.path().join("x.vlq"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}

#[test]
fn assemble_eval_mix_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let m = train(dir.path(), &cfg, "m.vlq", &["--split"]);

    let o = vlq(&["assemble", "--model", s(&m), "--bits", "3", "--out", s(&dir.path().join("m3.vlq"))]);
    assert_eq!(code(&o), 0);
    let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["level"], 1);
    let m3 = dir.path().join("m3.vlq");
    assert_eq!(rep["bytes_consumed"].as_u64().unwrap(), std::fs::metadata(&m3).unwrap().len());

    std::fs::remove_file(format!("{}.e2", m.display())).unwrap();
    let o = vlq(&["assemble", "--model", s(&m), "--bits", "4"]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("[2]"));
    assert_eq!(code(&vlq(&["assemble", "--model", s(&m), "--bits", "9"])), 2);

    let eval = |model: &Path, bits: &str| {
        let o = vlq(&["eval", "--model", s(model), "--bits", bits, "--config", s(&cfg), "--limit", "500"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_slice::<serde_json::Value>(&o.stdout).unwrap()
    };
    assert_eq!(eval(&m3, "3"), eval(&m3, "3"));
    assert!(eval(&m3, "2")["top5"].is_number());

    let o = vlq(&["mix", "--model", s(&m3), "--budget-bits", "1000"]);
    assert_eq!(code(&o), 4, "full model needed for the error table");

    let wrong = dir.path().join("wrong.toml");
    std::fs::write(&wrong, SMOKE.replace("input = [1, 6, 6]", "input = [1, 8, 8]")).unwrap();
    let o = vlq(&["eval", "--model", s(&m3), "--bits", "2", "--config", s(&wrong)]);
    assert_eq!(code(&o), 2);

    let full = train(dir.path(), &cfg, "full.vlq", &[]);
    let o = vlq(&["mix", "--model", s(&full), "--budget-bits", "10"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible"));
    let plan = dir.path().join("plan.json");
    let o = vlq(&[
        "mix",
        "--model",
        s(&full),
        "--budget-bits",
        "1000",
        "--config",
        s(&cfg),
        "--limit",
        "300",
        "--out",
        s(&plan),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> =
        String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let alloc = lines.last().unwrap();
    assert!(alloc["total_bits"].as_u64().unwrap() <= 1000);
    let o = vlq(&["eval", "--model", s(&full), "--plan", s(&plan), "--config", s(&cfg), "--limit", "300"]);
    assert_eq!(code(&o), 0);

    let o = vlq(&["inspect", "--model", s(&full)]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let mut per_level = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<i64> = line.split('\t').map(|x| x.parse().unwrap()).collect();
        let (bits, value, count) = (f[2], f[3], f[4]);
        assert!(value >= -(1 << (bits - 1)) && value < (1 << (bits - 1)));
        *per_level.entry((f[0], f[1])).or_insert(0) += count;
    }
    // 6·4·3·3 weights in the quantized layer
    assert!(per_level.values().all(|&c| c == 216));
    assert_eq!(per_level.len(), 3);

    let mut bytes = std::fs::read(&full).unwrap();
    bytes[20] ^= 1;
    let corrupt = dir.path().join("corrupt.vlq");
    std::fs::write(&corrupt, bytes).unwrap();
    assert_eq!(code(&vlq(&["inspect", "--model", s(&corrupt)])), 4);
}

#[test]
fn random_weights_score_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    // noise swamps the class centers, so inputs carry no label information
    let text = SMOKE
        .replace("synthetic_test = 1000", "synthetic_test = 10000")
        .replace("synthetic_noise = 0.5", "synthetic_noise = 1000.0")
        .replace("pretrain_epochs = 1", "pretrain_epochs = 0");
    let cfg = dir.path().join("random.toml");
    std::fs::write(&cfg, text).unwrap();
    let m = train(dir.path(), &cfg, "r.vlq", &["--epochs", "0"]);
    let o = vlq(&["eval", "--model", s(&m), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["count"], 10000);
    let top1 = v["top1"].as_f64().unwrap();
    assert!((top1 - 0.1).abs() <= 0.02, "top1 {top1}");
}
