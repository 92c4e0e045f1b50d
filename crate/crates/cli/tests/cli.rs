use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn memmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memmamba"))
        .args(args)
        .env_remove("MEMMAMBA_OUT")
        .output()
        .expect("spawn memmamba")
}

fn out_arg(dir: &Path) -> String {
    format!("out_dir={}", dir.display())
}

const TINY_THEORY: [&str; 2] = ["theory.instances=20", "theory.bibo_steps=200"];

fn tiny_lm(dir: &Path) -> Vec<String> {
    [
        "model.layers=2",
        "model.d_model=8",
        "model.d_state=4",
        "model.d_sum=8",
        "model.d_attn=4",
        "model.pool_capacity=4",
        "model.period=2",
        "model.lookback=1",
        "train.steps=3",
        "train.accum_steps=2",
        "train.context_len=16",
        "task.synthetic_bytes=4000",
        "eval.max_tokens=256",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([out_arg(dir)])
    .collect()
}

fn with_sets<'a>(cmd: &[&'a str], sets: &'a [String]) -> Vec<&'a str> {
    let mut v = cmd.to_vec();
    for s in sets {
        v.push("--set");
        v.push(s);
    }
    v
}

#[test]
fn unknown_subcommand_fails_with_usage() {
    let o = memmamba(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn invalid_config_reports_schema_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"d_modle": 8}}"#).unwrap();
    let o = memmamba(&["theory-check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model") && err.contains("d_modle"), "{err}");
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    for cmd in ["eval-ppl", "passkey", "fidelity"] {
        let o = memmamba(&[cmd, "--set", &out]);
        assert_eq!(o.status.code(), Some(3), "{cmd}");
        let missing = format!("checkpoint={}", dir.path().join("nope").display());
        let o = memmamba(&[cmd, "--set", &out, "--set", &missing]);
        assert_eq!(o.status.code(), Some(3), "{cmd}");
    }
}

#[test]
fn theory_check_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = memmamba(&["theory-check", "--set", TINY_THEORY[0], "--set", TINY_THEORY[1], "--set", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("theory.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(rows.len() >= 80);
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("true")));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "theory-check");
    assert_eq!(m["seed"], 123);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(!m["revision"].as_str().unwrap().is_empty());
}

#[test]
fn output_root_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_memmamba"))
        .args(["theory-check", "--set", TINY_THEORY[0], "--set", TINY_THEORY[1], "--set", "out_dir=/nonexistent/elsewhere"])
        .env("MEMMAMBA_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("theory.csv").is_file());
}

#[test]
fn train_then_evaluate_reproducibly() {
    let root = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let dir = root.path().join(run);
        let sets = tiny_lm(&dir);
        let o = memmamba(&with_sets(&["train"], &sets));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let ckpt = format!("checkpoint={}", dir.join("checkpoint").display());
        let mut eval_sets = sets.clone();
        eval_sets.push(ckpt);
        eval_sets.push("eval.fidelity_context_multiplier=4".into());
        eval_sets.push("eval.fidelity_sequences=2".into());
        for cmd in ["eval-ppl", "fidelity"] {
            let o = memmamba(&with_sets(&[cmd], &eval_sets));
            assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        }
        csvs.push(
            ["train_log.csv", "ppl.csv", "fidelity.csv"]
                .map(|f| std::fs::read(dir.join(f)).unwrap()),
        );
    }
    assert_eq!(csvs[0], csvs[1]);
    let ppl = String::from_utf8(csvs[0][1].clone()).unwrap();
    assert_eq!(ppl.lines().count(), 3);
}

#[test]
fn sweep_rejects_non_lm_task() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = memmamba(&["sweep", "--axis", "fusion", "--set", "task.kind=passkey", "--set", &out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_rejects_unknown_axis() {
    let o = memmamba(&["sweep", "--axis", "depth"]);
    assert!(!o.status.success());
}
