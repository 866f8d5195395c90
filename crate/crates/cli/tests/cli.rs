mod common;

use common::*;

#[test]
fn gen_without_repos_writes_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let s = ok(dir.path(), &["gen", "--seed", "7", "--repos", "0", "--out", "g"], false);
    assert_eq!(s["status"], "ok");
    assert_eq!(s["snippets"], 0);
    assert_eq!(std::fs::read(dir.path().join("g/corpus.jsonl")).unwrap().len(), 0);
    assert!(dir.path().join("g/manifest.json").exists());
}

#[test]
fn selfcheck_passes_and_lists_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let s = ok(dir.path(), &["selfcheck", "--out", "sc"], false);
    let names: Vec<&str> = s["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["gradient", "prefix_consistency", "masking", "icc_labels", "metric_oracles"]);
    assert!(s["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}

#[test]
fn eval_then_report_gives_one_row_per_exit_and_task() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tiny_config(d);
    for args in &PIPELINE[..4] {
        ok(d, args, false);
    }
    let s = ok(d, &["eval", "retrieval", "--config", "tiny.json", "--exits", "all", "--data", "dd", "--ckpt", "ret/model.ckpt", "--out", "evr"], false);
    assert_eq!(s["reports"].as_array().unwrap().len(), 4);
    ok(d, &["report", "--reports", "evr/reports.json", "--out", "rep"], false);
    let mut rdr = csv::Reader::from_path(d.join("rep/tradeoff.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..8], ["exit", "task", "gflops", "mrr", "ndcg", "map", "recall_at_1", "recall_at_5"]);
    let rows: Vec<(String, String)> = rdr.records().map(|r| r.unwrap()).map(|r| (r[0].to_string(), r[1].to_string())).collect();
    for task in ["t2c", "c2c"] {
        let exits: Vec<&str> = rows.iter().filter(|r| r.1 == task).map(|r| r.0.as_str()).collect();
        assert_eq!(exits, ["1", "2"], "{task}");
    }

    // a subset of exits and a single-exit baseline
    ok(d, &["eval", "retrieval", "--config", "tiny.json", "--exits", "2", "--data", "dd", "--ckpt", "ret/model.ckpt", "--out", "ev2"], false);
    let s = ok(d, &["report", "--reports", "evr/reports.json", "--baselines", "ev2/reports.json", "--out", "rep2"], false);
    assert_eq!(s["deltas"], 2);
    let text = std::fs::read_to_string(d.join("rep2/tradeoff.csv")).unwrap();
    assert!(text.contains("2,t2c_sd_delta,") && text.contains("2,t2c_single_exit,"));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tiny_config(d);
    let missing = mosekit(d, &["pretrain", "--data", "nowhere", "--out", "x"], false);
    assert_eq!(missing.code, 1);
    assert_eq!(missing.summary()["status"], "error");
    assert_eq!(mosekit(d, &["gen", "--set", "gen.nope=1", "--out", "x"], false).code, 1);
    assert_eq!(mosekit(d, &["gen", "--exits", "one", "--out", "x"], false).code, 1);
    assert_eq!(mosekit(d, &["frobnicate"], false).code, 1);
    assert_eq!(mosekit(d, &["gen"], false).code, 1, "--out is required");
    assert_eq!(mosekit(d, &["--help"], false).code, 0);

    ok(d, PIPELINE[0], false);
    std::fs::write(d.join("data/corpus.jsonl"), "{not json\n").unwrap();
    assert_eq!(mosekit(d, &["dedup", "--data", "data", "--out", "x"], false).code, 2);
    ok(d, PIPELINE[0], false);
    ok(d, &["pretrain", "--config", "tiny.json", "--data", "data", "--out", "pre"], false);
    // a checkpoint built for another vocabulary
    ok(d, &["gen", "--config", "tiny.json", "--seed", "8", "--set", "gen.triplets=40", "--out", "other"], false);
    let r = mosekit(d, &["eval", "retrieval", "--config", "tiny.json", "--data", "other", "--ckpt", "pre/model.ckpt", "--out", "x"], false);
    assert_eq!(r.code, 2, "{}", r.stderr);
    let r = mosekit(d, &["eval", "retrieval", "--config", "tiny.json", "--exits", "5", "--data", "data", "--ckpt", "pre/model.ckpt", "--out", "x"], false);
    assert_eq!(r.code, 1, "{}", r.stderr);
}

#[test]
fn pretraining_divergence_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tiny_config(d);
    ok(d, PIPELINE[0], false);
    let r = mosekit(
        d,
        &["pretrain", "--config", "tiny.json", "--data", "data", "--set",
          r#"pretrain.optimizer={"beta1":0.9,"beta2":0.95,"eps":1e-6,"weight_decay":0.0,"base_lr":1e30,"warmup_steps":0,"milestones":[],"clip_norm":0.0}"#,
          "--out", "x"],
        false,
    );
    assert_eq!(r.code, 3, "{}", r.stderr);
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tiny_config(d);
    for args in &PIPELINE[..4] {
        ok(d, args, true);
    }
    let s = ok(d, &["replay", "ret/manifest.json", "--out", "again"], false);
    assert_eq!(s["outputs_matched"], 2);
    assert_eq!(std::fs::read(d.join("ret/model.ckpt")).unwrap(), std::fs::read(d.join("again/model.ckpt")).unwrap());

    let path = d.join("ret/manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    m["outputs"][0]["sha256"] = "00".into();
    std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(mosekit(d, &["replay", "ret/manifest.json"], false).code, 3);
}

#[test]
fn threads_flag_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let s = ok(dir.path(), &["gen", "--threads", "4", "--repos", "1", "--out", "g"], false);
    assert_eq!(s["snippets"], 16);
}
