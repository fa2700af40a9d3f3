use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pldr::config::{preset, RunConfig, PRESETS};
use pldr::dag::{DagCoefficients, REPORT_HEADER};

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn pldr(args: &[&str], telemetry: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pldr"))
        .args(args)
        .env("PLDR_TELEMETRY_DIR", telemetry)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The toy config cut down to a few steps, written next to a copy of the corpus.
fn short_toy(dir: &Path, steps: u64) -> PathBuf {
    let mut c = RunConfig::load(&manifest().join("configs/toy.json")).unwrap();
    std::fs::copy(&c.data.train, dir.join("toy.txt")).unwrap();
    c.data.train = "toy.txt".into();
    c.data.validation = Some("toy.txt".into());
    c.optimizer.total_steps = steps;
    c.optimizer.warmup_steps = 2;
    c.telemetry.log_every = 2;
    c.telemetry.val_every = 4;
    c.telemetry.val_batches = 2;
    let path = dir.join("toy.json");
    std::fs::write(&path, c.to_canonical_json().unwrap()).unwrap();
    path
}

#[test]
fn fixtures_match_presets_and_round_trip() {
    for name in PRESETS {
        let path = manifest().join(format!("configs/{}.json", name.to_lowercase()));
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed = RunConfig::from_json(&text).unwrap();
        assert_eq!(parsed, preset(name).unwrap(), "{name}");
        assert_eq!(RunConfig::from_json(&parsed.to_canonical_json().unwrap()).unwrap(), parsed);
    }
    let dag4 = RunConfig::load(&manifest().join("configs/pldrv5-dag-4.json")).unwrap();
    assert_eq!(dag4.dag, DagCoefficients { lambda1: Some(0.005), lambda2: Some(0.005), lambda3: Some(0.005) });
}

#[test]
fn toy_pretrain_then_generate_inspect_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let tel = dir.path().join("tel");
    let cfg = short_toy(dir.path(), 6);
    let ckpt = dir.path().join("toy.pldr");
    let corpus_before = std::fs::read(dir.path().join("toy.txt")).unwrap();

    let o = pldr(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", ckpt.to_str().unwrap()], &tel);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("stopped after step 6") && text.contains("DL(A_LM) = "), "{text}");
    assert_eq!(std::fs::read(dir.path().join("toy.txt")).unwrap(), corpus_before);

    let gen = |extra: &[&str]| {
        let mut args = vec!["generate", "--checkpoint", ckpt.to_str().unwrap(), "--prompt", "The "];
        args.extend_from_slice(extra);
        let o = pldr(&args, &tel);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    assert_eq!(gen(&["--top-k", "1", "--max-new-tokens", "16"]), gen(&["--top-k", "1", "--max-new-tokens", "16"]));
    assert_eq!(gen(&["--top-p", "0.8", "--seed", "4"]), gen(&["--top-p", "0.8", "--seed", "4"]));

    let csv = dir.path().join("dag.csv");
    let o = pldr(
        &[
            "dag-inspect",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--prompt",
            "The ",
            "--out",
            csv.to_str().unwrap(),
        ],
        &tel,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("toy | λ = NA, NA, NA | DL(A_LM) = "));
    let report = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(report.lines().next(), Some(REPORT_HEADER));
    assert_eq!(report.lines().count(), 4);

    let o = pldr(&["eval-loss", "--checkpoint", ckpt.to_str().unwrap(), "--config", cfg.to_str().unwrap()], &tel);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("toy: loss "));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(tel.join("toy.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.iter().filter(|v| v["kind"] == "train").count(), 3);
    assert_eq!(lines.iter().filter(|v| v["kind"] == "validation").count(), 1);
    assert_eq!(lines.last().unwrap()["kind"], "eval");

    // resuming with a longer budget continues from the checkpoint
    let longer = short_toy(dir.path(), 8);
    let o = pldr(
        &[
            "pretrain",
            "--config",
            longer.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ],
        &tel,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("resuming at step 6") && stdout(&o).contains("stopped after step 8"));
}

#[test]
fn operator_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let tel = dir.path().join("tel");
    let cfg = short_toy(dir.path(), 4);

    std::fs::remove_file(dir.path().join("toy.txt")).unwrap();
    let o = pldr(&["pretrain", "--config", cfg.to_str().unwrap()], &tel);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corpus not found"), "{}", stderr(&o));

    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["optimizer"]["learning_rate"] = serde_json::json!(1e-3);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let o = pldr(&["pretrain", "--config", bad.to_str().unwrap()], &tel);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = pldr(&["generate", "--checkpoint", "missing.pldr", "--prompt", "x"], &tel);
    assert_eq!(o.status.code(), Some(2));

    let o = pldr(&["generate", "--checkpoint", "missing.pldr", "--prompt", "x", "--top-p", "1.5"], &tel);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("top-p"), "{}", stderr(&o));
}
