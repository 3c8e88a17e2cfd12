use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use padnet::data::{generate_dataset, read_dataset_file, write_dataset_file, IGNORE_LABEL};
use padnet::{DistillVariant, ExperimentConfig, NetworkConfig, SceneConfig, Tensor4};
use tempfile::TempDir;

fn padnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_padnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.network = NetworkConfig::tiny(3);
    cfg.data.scene = SceneConfig {
        height: 16,
        width: 16,
        num_classes: 3,
        ..SceneConfig::default()
    };
    cfg.data.train_count = 4;
    cfg.data.val_count = 2;
    cfg.training.phase1_epochs = 1;
    cfg.training.phase2_epochs = 2;
    cfg
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the tiny experiment into `dir/run`; returns the run directory.
fn train(dir: &TempDir, seed: &str) -> (PathBuf, Output) {
    let cfg = write_json(dir.path(), "cfg.json", &tiny_experiment());
    let out = dir.path().join(format!("run{seed}"));
    let o = padnet(&["train", "--config", arg(&cfg), "--seed", seed, "--out", arg(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (out, o)
}

fn dataset(dir: &Path, name: &str, samples: &[padnet::Sample]) -> PathBuf {
    let p = dir.join(name);
    write_dataset_file(&p, samples).unwrap();
    p
}

#[test]
fn missing_field_is_named() {
    let dir = TempDir::new().unwrap();
    let mut v = serde_json::to_value(tiny_experiment()).unwrap();
    v["training"].as_object_mut().unwrap().remove("momentum");
    let cfg = write_json(dir.path(), "bad.json", &v);
    let o = padnet(&["train", "--config", arg(&cfg), "--out", arg(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("momentum"), "{}", stderr(&o));
}

#[test]
fn training_is_deterministic_and_logs_every_loss() {
    let dir = TempDir::new().unwrap();
    let (run_a, a) = train(&dir, "7");
    let sha = |o: &Output| stdout(o).lines().find(|l| l.starts_with("checkpoint sha256")).unwrap().to_string();
    let again = TempDir::new().unwrap();
    let (_, b) = train(&again, "7");
    assert_eq!(sha(&a), sha(&b));
    assert!(stdout(&a).contains("mean_iou"));

    let curve = std::fs::read_to_string(run_a.join("loss_curve.tsv")).unwrap();
    let header: Vec<&str> = curve.lines().next().unwrap().split('\t').collect();
    let last: Vec<&str> = curve.lines().last().unwrap().split('\t').collect();
    for i in 1..=6 {
        let col = header.iter().position(|h| h.starts_with(&format!("L{i}_"))).unwrap();
        assert_ne!(last[col], "-", "{} inactive", header[col]);
    }
    for f in ["config.json", "checkpoint.padc", "metrics.tsv"] {
        assert!(run_a.join(f).exists(), "{f}");
    }
}

#[test]
fn eval_rejects_other_architecture() {
    let dir = TempDir::new().unwrap();
    let (run, _) = train(&dir, "0");
    let mut other = tiny_experiment();
    other.network.head_width = 6;
    let cfg = write_json(dir.path(), "other.json", &other);
    let data = dataset(dir.path(), "val.padd", &generate_dataset(0, 1, &other.data.scene).unwrap());
    let ckpt = run.join("checkpoint.padc");
    let o = padnet(&["eval", "--ckpt", arg(&ckpt), "--data", arg(&data), "--config", arg(&cfg)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    let o = padnet(&["eval", "--ckpt", arg(&ckpt), "--data", arg(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn eval_edge_cases() {
    let dir = TempDir::new().unwrap();
    let (run, _) = train(&dir, "1");
    let ckpt = run.join("checkpoint.padc");

    let empty = dataset(dir.path(), "empty.padd", &[]);
    let o = padnet(&["eval", "--ckpt", arg(&ckpt), "--data", arg(&empty)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("undefined"), "{}", stdout(&o));

    // Predictions depend on the image alone.
    let scene = tiny_experiment().data.scene;
    let samples = generate_dataset(3, 3, &scene).unwrap();
    let blank: Vec<_> = samples
        .iter()
        .map(|s| {
            let mut b = s.clone();
            b.depth = Tensor4::zeros(s.depth.shape());
            b.labels.data.iter_mut().for_each(|l| *l = IGNORE_LABEL);
            b
        })
        .collect();
    let full = dataset(dir.path(), "full.padd", &samples);
    let blank = dataset(dir.path(), "blank.padd", &blank);
    assert_eq!(read_dataset_file(&blank).unwrap().len(), 3);
    let (da, db) = (dir.path().join("dump_a"), dir.path().join("dump_b"));
    for (data, dump) in [(&full, &da), (&blank, &db)] {
        let o = padnet(&["eval", "--ckpt", arg(&ckpt), "--data", arg(data), "--dump-dir", arg(dump)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["0000_depth.pfm", "0002_labels.pgm"] {
        assert_eq!(std::fs::read(da.join(name)).unwrap(), std::fs::read(db.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn gradcheck_outcomes() {
    let dir = TempDir::new().unwrap();
    let plain = NetworkConfig {
        distill_variant: DistillVariant::None,
        ..NetworkConfig::tiny(3)
    };
    let cfg = write_json(dir.path(), "none.json", &plain);
    let o = padnet(&["gradcheck", "--config", arg(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS"));
    assert!(!out.contains("distill.attention") && !out.contains("distill.message"), "{out}");

    let o = padnet(&["gradcheck", "--config", arg(&cfg), "--corrupt-conv-grad", "1.5"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("frontend.stage1"), "{}", stderr(&o));

    let desk = write_json(dir.path(), "desk.json", &NetworkConfig::desk(5));
    assert_eq!(padnet(&["gradcheck", "--config", arg(&desk)]).status.code(), Some(2));
}

#[test]
fn unknown_grid_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = padnet(&["ablate", "--grid", "nope", "--out", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trend"));
}
