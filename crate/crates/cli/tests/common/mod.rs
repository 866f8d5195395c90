#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

pub const TINY_CONFIG: &str = r#"{
  "model": {"depth": 2, "exits": [1, 2], "hidden": 16, "n_heads": 2, "n_kv_heads": 1,
            "intermediate": 32, "max_seq": 64, "proj_dim": 8},
  "pretrain": {"plan": {"steps": 4, "batch_size": 4, "max_len": 64}},
  "retrieval": {"plan": {"steps": 4, "batch_size": 4, "max_len": 64}},
  "clone": {"plan": {"steps": 4, "batch_size": 4, "max_len": 64}},
  "eval": {"n_distractors": 9, "max_len": 64, "n_perm": 200},
  "gen": {"repos": 2, "snippets_per_repo": 8, "triplets": 24, "clone_pairs": 16, "plant_rate": 0.25}
}"#;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    /// The one-line JSON summary printed on stdout.
    pub fn summary(&self) -> Value {
        let lines: Vec<&str> = self.stdout.lines().collect();
        assert_eq!(lines.len(), 1, "stdout: {}", self.stdout);
        serde_json::from_str(lines[0]).expect("summary is JSON")
    }
}

pub fn mosekit(dir: &Path, args: &[&str], check_mode: bool) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mosekit"));
    cmd.current_dir(dir).args(args).env_remove("MOSEKIT_CHECK_MODE");
    if check_mode {
        cmd.env("MOSEKIT_CHECK_MODE", "1");
    }
    let Output { status, stdout, stderr } = cmd.output().expect("binary runs");
    Run {
        code: status.code().expect("exit code"),
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

pub fn ok(dir: &Path, args: &[&str], check_mode: bool) -> Value {
    let r = mosekit(dir, args, check_mode);
    assert_eq!(r.code, 0, "{args:?} failed: {}", r.stderr);
    r.summary()
}

pub fn write_tiny_config(dir: &Path) {
    std::fs::write(dir.join("tiny.json"), TINY_CONFIG).unwrap();
}

/// Every command of the pipeline on the tiny config, in dependency order.
pub const PIPELINE: &[&[&str]] = &[
    &["gen", "--config", "tiny.json", "--seed", "7", "--out", "data"],
    &["dedup", "--config", "tiny.json", "--data", "data", "--out", "dd"],
    &["pretrain", "--config", "tiny.json", "--data", "dd", "--out", "pre"],
    &["finetune", "retrieval", "--config", "tiny.json", "--data", "dd", "--ckpt", "pre/model.ckpt", "--out", "ret"],
    &["finetune", "clone", "--config", "tiny.json", "--data", "dd", "--ckpt", "pre/model.ckpt", "--out", "clo"],
    &["embed", "--config", "tiny.json", "--data", "dd", "--ckpt", "ret/model.ckpt", "--out", "emb"],
    &["eval", "retrieval", "--config", "tiny.json", "--data", "dd", "--ckpt", "ret/model.ckpt", "--out", "evr"],
    &["eval", "clone", "--config", "tiny.json", "--data", "dd", "--ckpt", "clo/model.ckpt", "--out", "evc"],
    &["report", "--reports", "evr/reports.json", "evc/reports.json", "--out", "rep"],
    &["permtest", "--config", "tiny.json", "--data", "dd", "--ckpt", "ret/model.ckpt", "--out", "perm"],
    &["selfcheck", "--out", "sc"],
];

/// Output directory named by a command line.
pub fn out_of(args: &[&str]) -> String {
    let i = args.iter().position(|a| *a == "--out").unwrap();
    args[i + 1].to_string()
}
