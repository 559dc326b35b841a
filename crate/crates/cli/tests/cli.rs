use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn gdcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdcn"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gdcn(args);
    assert!(
        out.status.success(),
        "gdcn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    gdcn(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny network and schedule so full runs take well under a second.
fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let config = serde_json::json!({
        "model": {"latent_dim": 4, "encoder_hidden": [16], "denoiser_hidden": [8]},
        "cl.h_dim": 8,
        "train": {"pretrain_epochs": 3, "finetune_epochs": 2, "batch_size": 32, "eval_every": 0, "kmeans_restarts": 2},
        "sgdf.T": 50
    });
    fs::write(&path, config.to_string()).unwrap();
    path
}

fn generate(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&["generate", "--clusters", "3", "--per-cluster", "20", "--dims", "3,4,2", "--seed", "1", "--out", s(&out)]);
    out
}

#[test]
fn generate_is_byte_reproducible_and_prints_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = |out: &Path| {
        vec!["generate", "--clusters", "3", "--per-cluster", "200", "--dims", "3,3,3", "--seed", "1", "--out"]
            .into_iter()
            .map(String::from)
            .chain([s(out).to_string()])
            .collect::<Vec<_>>()
    };
    let summary = ok(&args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    ok(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(summary.starts_with("Dataset\tSamples\tViews\tClusters\tView dimensions\n"));
    assert!(summary.contains("\t600\t3\t3\t3,3,3"));
    for file in ["manifest.json", "view_0.csv", "view_1.csv", "view_2.csv", "labels.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }

    let single = dir.path().join("single");
    ok(&["generate", "--clusters", "1", "--per-cluster", "10", "--dims", "2", "--out", s(&single)]);
    let ds = gdcn_core::data::load_dataset(&single).unwrap();
    assert_eq!(ds.n_clusters(), 1);
    assert!(ds.labels().unwrap().iter().all(|&l| l == 0));
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = generate(dir.path(), "data");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let stdout = ok(&["train", "--config", s(&config), "--dataset", s(&data), "--seed", "4", "--out", s(&out)]);
        (out, stdout)
    };
    let (a, stdout) = run("a");
    let metrics: Value = serde_json::from_str(stdout.trim()).unwrap();
    for key in ["acc", "nmi", "pur"] {
        let v = metrics[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    for file in ["config.json", "epoch_log.csv", "metrics.json", "checkpoint.json", "checkpoint_pretrain.json"] {
        assert!(a.join(file).is_file(), "{file}");
    }
    let log = fs::read_to_string(a.join("epoch_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,phase,loss_rec,loss_cl,loss_total,acc");
    assert_eq!(lines.len(), 1 + 3 + 2);
    assert!(lines[3].contains(",pretrain,") && lines[4].contains(",finetune,"));

    let (b, _) = run("b");
    for file in ["epoch_log.csv", "metrics.json", "checkpoint.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn ablation_flag_changes_only_the_ablation_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = generate(dir.path(), "data");
    let echo = |ablation: Option<&str>| -> Value {
        let out = dir.path().join(ablation.unwrap_or("base"));
        let mut args = vec!["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&out)];
        if let Some(a) = ablation {
            args.extend(["--ablation", a]);
        }
        ok(&args);
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap()
    };
    let base = echo(None);
    for ablation in ["no-sgdf", "no-cl"] {
        let mut changed = echo(Some(ablation));
        assert_eq!(changed["ablation"], ablation);
        let obj = changed.as_object_mut().unwrap();
        let mut base = base.as_object().unwrap().clone();
        for key in ["ablation", "out"] {
            obj.remove(key);
            base.remove(key);
        }
        assert_eq!(obj, &base);
    }
    assert_eq!(code(&["train", "--config", s(&config), "--dataset", s(&data), "--ablation", "w/o-cl"]), 2);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = generate(dir.path(), "data");
    let out = dir.path().join("runs");
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        code(&args)
    };
    assert_eq!(train(&["--set", "sgdf.K=1"]), 2);
    assert_eq!(train(&["--set", "train.batch_size=1"]), 2);
    assert_eq!(train(&["--set", "train.no_such_key=3"]), 2);
    assert_eq!(train(&["--set", "train.learning_rate=1e300"]), 3);
    assert_eq!(code(&["train", "--config", s(&config), "--dataset", s(&dir.path().join("missing"))]), 2);
    assert_eq!(code(&["train", "--config", s(&dir.path().join("nope.json"))]), 4);

    fs::write(dir.path().join("file"), "x").unwrap();
    let blocked = dir.path().join("file").join("sub");
    assert_eq!(code(&["generate", "--per-cluster", "5", "--out", s(&blocked)]), 4);

    let bad = gdcn(&["train", "--config", s(&config), "--dataset", s(&data), "--set", "cl.temperature=-1"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("cl.temperature"));
}

#[test]
fn sweeps_write_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = generate(dir.path(), "data");
    let out = dir.path().join("sweep");
    for (param, values) in [("B", "2,4,6,8,10"), ("K", "5,15,25,35,45")] {
        let stdout = ok(&["sweep", "--param", param, "--values", values, "--config", s(&config), "--dataset", s(&data), "--out", s(&out)]);
        let csv = fs::read_to_string(out.join(format!("sweep_{param}.csv"))).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "value,acc,nmi,pur");
        assert_eq!(lines.len(), 6);
        let listed: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(listed.join(","), values);
        assert_eq!(stdout.trim(), csv.trim());
    }
    assert_eq!(code(&["sweep", "--param", "K", "--values", "1", "--config", s(&config), "--dataset", s(&data), "--out", s(&out)]), 2);
    assert_eq!(code(&["sweep", "--param", "T", "--values", "3", "--config", s(&config), "--dataset", s(&data)]), 2);
}

#[test]
fn export_and_eval_use_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = generate(dir.path(), "data");
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run)]);
    let checkpoint = run.join("checkpoint.json");

    let fused_dir = dir.path().join("fused");
    let listed = ok(&["export-embeddings", "--checkpoint", s(&checkpoint), "--dataset", s(&data), "--out", s(&fused_dir)]);
    assert_eq!(listed.lines().count(), 1);
    let text = fs::read_to_string(fused_dir.join("embeddings_fused.csv")).unwrap();
    assert_eq!(text.lines().count(), 60);
    assert!(text.lines().all(|l| l.split(',').count() == 4 + 1));

    let views_dir = dir.path().join("views");
    ok(&["export-embeddings", "--checkpoint", s(&checkpoint), "--dataset", s(&data), "--which", "per-view", "--out", s(&views_dir)]);
    for m in 0..3 {
        assert!(views_dir.join(format!("embeddings_view_{m}.csv")).is_file());
    }

    let eval_dir = dir.path().join("eval");
    let stdout = ok(&["eval", "--checkpoint", s(&checkpoint), "--dataset", s(&data), "--out", s(&eval_dir)]);
    let report: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(report["acc"].as_f64().unwrap() > 0.0);
    assert_eq!(fs::read_to_string(eval_dir.join("metrics.json")).unwrap().trim(), stdout.trim());

    let other = dir.path().join("other");
    ok(&["generate", "--dims", "5,5", "--per-cluster", "5", "--out", s(&other)]);
    assert_eq!(code(&["export-embeddings", "--checkpoint", s(&checkpoint), "--dataset", s(&other), "--out", s(&other)]), 2);
    assert_eq!(code(&["eval", "--checkpoint", s(&checkpoint), "--dataset", s(&other)]), 2);
    assert_eq!(code(&["eval", "--checkpoint", s(&dir.path().join("none.json")), "--dataset", s(&data)]), 4);
}
