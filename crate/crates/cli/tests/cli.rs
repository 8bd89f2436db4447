use std::path::Path;
use std::process::{Command, Output};

use momentloc::harness::RunConfig;

fn momentloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_momentloc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut c = RunConfig::synthetic_default();
    c.train.epochs = 2;
    c.synthetic.n_samples = 30;
    c.paths.dataset = Some(dir.join("data"));
    c.paths.checkpoint = Some(dir.join("model.ckpt"));
    c.paths.train_log = Some(dir.join("train_log.json"));
    c.paths.predictions = Some(dir.join("predictions.jsonl"));
    let path = dir.join("run.toml");
    std::fs::write(&path, c.to_toml()).unwrap();
    path
}

#[test]
fn synth_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    assert!(momentloc(&["synth", "--config", cfg]).status.success());
    assert!(dir.path().join("data/manifest.json").exists());

    let out = momentloc(&["train", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("model.ckpt").exists());

    let report = dir.path().join("eval.json");
    let out = momentloc(&["eval", "--config", cfg, "--swap-degenerate", "--report", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("R@0.5") && table.contains("mIoU"));

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["config"]["eval"]["swap_degenerate"], true);
    assert_eq!(json["split"], "val");
    assert!(json["report"]["miou"].as_f64().is_some());
    let lines = std::fs::read_to_string(dir.path().join("predictions.jsonl")).unwrap();
    assert_eq!(lines.lines().count() as u64, json["report"]["n_samples"].as_u64().unwrap());
}

#[test]
fn exit_codes() {
    assert_eq!(momentloc(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(momentloc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(momentloc(&["train", "--config", "/definitely/missing.toml"]).status.code(), Some(1));
    assert_eq!(momentloc(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    // The dataset directory was never generated.
    assert_eq!(momentloc(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(momentloc(&["train", "--config", cfg.to_str().unwrap(), "--variant", "bogus"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = momentloc(&["gradcheck", "--synthetic"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("variant full") && text.contains("variant single_query"));
    assert_eq!(text.matches("all blocks pass").count(), 2);
    assert!(!text.contains("FAIL"));
}

#[test]
fn shipped_config_matches_synthetic_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let c = RunConfig::load(&path).unwrap();
    let d = RunConfig::synthetic_default();
    assert_eq!(c.model, d.model);
    assert_eq!(c.optimizer, d.optimizer);
    assert_eq!(c.train, d.train);
    assert_eq!(c.graph, d.graph);
    assert_eq!(c.synthetic, d.synthetic);
}
