use std::path::Path;
use std::process::{Command, Output};

use gersp::trainer::{load_checkpoint, CheckpointManifest, TrainingConfig};

fn gersp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gersp"))
        .args(args)
        .env("GERSP_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn exit_codes_separate_usage_from_runtime() {
    assert_eq!(gersp(&["--help"]).status.code(), Some(0));
    assert_eq!(gersp(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(gersp(&["probe", "--data", "x"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let out = gersp(&["inspect", p(&dir.path().join("absent.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]"));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let out = gersp(&["inspect", p(&junk)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[bad-magic]"));
}

#[test]
fn config_flags_override_file_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("in.json");
    std::fs::write(&file, r#"{"tau": 0.2, "alpha": 0.25, "epochs": 3}"#).unwrap();
    let dumped = dir.path().join("out.json");
    let out = gersp(&[
        "pretrain", "--config", p(&file), "--alpha", "0.5", "--set", "queue_capacity=256",
        "--dump-config", p(&dumped),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg: TrainingConfig = serde_json::from_str(&std::fs::read_to_string(&dumped).unwrap()).unwrap();
    let mut expected = TrainingConfig::desk();
    expected.tau = 0.2;
    expected.alpha = 0.5;
    expected.epochs = 3;
    expected.queue_capacity = 256;
    assert_eq!(cfg, expected);

    // The dumped file reproduces itself.
    let again = dir.path().join("again.json");
    assert_eq!(gersp(&["pretrain", "--config", p(&dumped), "--dump-config", p(&again)]).status.code(), Some(0));
    assert_eq!(std::fs::read(&dumped).unwrap(), std::fs::read(&again).unwrap());

    std::fs::write(&file, r#"{"temperature": 0.2}"#).unwrap();
    let out = gersp(&["pretrain", "--config", p(&file), "--dump-config", p(&dumped)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature"));

    let out = gersp(&["pretrain", "--tau", "0", "--dump-config", p(&dumped)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_pretrain_inspect_probe() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = gersp(&[
        "gen-data", "--out", p(&data), "--n-natural", "24", "--n-rs", "16", "--k-classes", "4",
        "--image-size", "16", "--n-scenes", "24", "--seed", "3",
    ]);
    assert_eq!(out.status.code(), Some(0));
    for sub in ["natural", "rs", "rs_scenes", "corpus.json"] {
        assert!(data.join(sub).exists(), "{sub}");
    }

    let cfg_path = dir.path().join("cfg.json");
    let mut cfg = TrainingConfig::desk();
    cfg.encoder.stage_widths = vec![4, 4, 8, 8];
    cfg.encoder.stem_width = 4;
    cfg.encoder.input_size = 16;
    cfg.augment.out_size = 16;
    cfg.encoder.proj_hidden_dim = 8;
    cfg.encoder.proj_out_dim = 8;
    cfg.encoder.n_classes = 4;
    cfg.encoder.bn_groups = 2;
    cfg.batch_size = 8;
    cfg.queue_capacity = 16;
    cfg.epochs = 1;
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();

    let ckpt = dir.path().join("m.ckpt");
    let out = gersp(&[
        "pretrain", "--config", p(&cfg_path), "--natural", p(&data.join("natural")), "--rs",
        p(&data.join("rs")), "--out", p(&ckpt), "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("m.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let out = gersp(&["inspect", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let manifest_json = &stdout[..stdout.rfind("crc32").unwrap()];
    let printed: CheckpointManifest = serde_json::from_str(manifest_json).unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();
    assert_eq!(printed, loaded.manifest);
    assert!(stdout.trim_end().ends_with(&format!("{:08x} ok", loaded.file_crc)));

    let report = dir.path().join("report.json");
    let out = gersp(&[
        "probe", "--checkpoint", p(&ckpt), "--data", p(&data.join("rs_scenes")), "--trials", "2",
        "--epochs", "2", "--train-fraction", "0.5", "--report", p(&report),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["accuracies"].as_array().unwrap().len(), 2);
    assert_eq!(r["std_kind"], "population");
}
