//! Subcommand implementations. Every command reads its inputs, writes its
//! outputs atomically into `--out` and leaves a manifest next to them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use mosekit_core::datagen::{gen_clone_pairs, gen_corpus, gen_triplets, plant_near_duplicates, ClonePair};
use mosekit_core::dedup::{dedup_triplets, lsh_dedup};
use mosekit_core::evalkit::{
    c2c_task, clone_eval, distillation_deltas, embed_texts, permutation_test, positive_pair_scores, resolve_exits,
    retrieval_eval, t2c_task, tradeoff_report, EvalOptions, ExitReport,
};
use mosekit_core::packing::RepoPool;
use mosekit_core::selfcheck;
use mosekit_core::training::{
    finetune_clone, finetune_retrieval, pretrain, pretrain_accuracy, TrainOutcome, INSTRUCTION_C2C, INSTRUCTION_T2C,
};
use mosekit_core::{jsonl, Checkpoint, EncoderConfig, Scalar, Snippet, Triplet, Vocab};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{resolve, RunConfig, StageConfig};
use crate::manifest::{with_atomic, Outputs, RunManifest, MANIFEST_FILE};
use crate::{Cli, Cmd, Ctx, EmbedSource, Failure, Summary, Task};

pub const CORPUS: &str = "corpus.jsonl";
pub const TRIPLETS: &str = "triplets.jsonl";
pub const CLONE_PAIRS: &str = "clone_pairs.jsonl";
pub const VOCAB: &str = "vocab.json";
pub const PLANTED: &str = "planted.json";
pub const REMOVED: &str = "removed.jsonl";
pub const CKPT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const REPORTS: &str = "reports.json";
pub const PERMTEST: &str = "permtest.json";
pub const TRADEOFF_CSV: &str = "tradeoff.csv";
pub const TRADEOFF_PLOT: &str = "tradeoff_plot.json";
pub const SELFCHECK: &str = "selfcheck.json";

const SINGLE_EXIT_SUFFIX: &str = "single_exit";
/// Stream offsets keeping the generators of one seed apart.
const TRIPLET_SEED_OFFSET: u64 = 1;
const CLONE_SEED_OFFSET: u64 = 2;
const PLANT_SEED_OFFSET: u64 = 3;
/// Batches drawn for the accuracy summary after pre-training.
const PRETRAIN_EVAL_BATCHES: u64 = 2;

#[derive(Debug, Serialize)]
struct EmbeddingRecord {
    id: String,
    vector: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct PermtestRecord {
    exit_a: usize,
    exit_b: usize,
    mean_a: f64,
    mean_b: f64,
    statistic: f64,
    p_value: f64,
    reject: bool,
}

fn mk<E: std::fmt::Display>(f: fn(String) -> Failure, what: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| f(format!("{what}: {e}"))
}

/// Missing inputs are usage errors; malformed ones are data errors.
fn require(path: &Path) -> Result<&Path, Failure> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::usage(format!("missing input {}", path.display())))
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    Ok(jsonl::read(require(path)?)?)
}

fn parse_exits(raw: &str) -> Result<Vec<usize>, Failure> {
    if raw.trim() == "all" {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Failure::usage(format!("--exits: `{s}` is not a layer number"))))
        .collect()
}

/// Loads a checkpoint at precision `T`, casting when it was stored at the
/// other one.
fn load_ckpt<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, Failure> {
    let path = require(path)?;
    if Checkpoint::<T>::peek_dtype(path)? == T::DTYPE {
        return Ok(Checkpoint::load(path)?);
    }
    let other = if T::DTYPE == "f32" { cast_from::<f64, T>(path)? } else { cast_from::<f32, T>(path)? };
    log::info!("checkpoint {} cast to {}", path.display(), T::DTYPE);
    Ok(other)
}

fn cast_from<S: Scalar, T: Scalar>(path: &Path) -> Result<Checkpoint<T>, Failure> {
    let c = Checkpoint::<S>::load(path)?;
    Ok(Checkpoint { params: c.params.cast(&c.config), config: c.config, step: c.step })
}

fn check_vocab<T>(ckpt: &Checkpoint<T>, vocab: &Vocab) -> Result<(), Failure> {
    if ckpt.config.vocab_size != vocab.len() {
        return Err(Failure::data(format!(
            "checkpoint vocabulary size {} differs from vocab.json size {}",
            ckpt.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

fn model_config(cfg: &RunConfig, vocab: &Vocab) -> Result<EncoderConfig, Failure> {
    let mut m = cfg.model.clone();
    m.vocab_size = vocab.len();
    m.validate()?;
    Ok(m)
}

fn start_ckpt<T: Scalar>(path: Option<&Path>, cfg: &RunConfig, vocab: &Vocab) -> Result<Checkpoint<T>, Failure> {
    let ckpt = match path {
        Some(p) => load_ckpt(p)?,
        None => Checkpoint::init(model_config(cfg, vocab)?, cfg.seed)?,
    };
    check_vocab(&ckpt, vocab)?;
    Ok(ckpt)
}

fn write_json<V: Serialize + ?Sized>(out: &mut Outputs, name: &str, v: &V) -> Result<PathBuf, Failure> {
    let bytes = serde_json::to_vec_pretty(v).map_err(mk(Failure::data, name))?;
    out.write(name, &bytes)
}

fn write_jsonl<V: Serialize>(out: &mut Outputs, name: &str, records: &[V]) -> Result<PathBuf, Failure> {
    let p = out.path(name);
    with_atomic(&p, |tmp| Ok(jsonl::write(tmp, records)?))?;
    Ok(p)
}

fn save_training<T: Scalar>(out: &mut Outputs, res: &TrainOutcome<T>, s: &mut Summary) -> Result<(), Failure> {
    let p = out.path(CKPT);
    with_atomic(&p, |tmp| Ok(res.ckpt.save(tmp)?))?;
    write_jsonl(out, TRAIN_LOG, &res.log)?;
    s.insert("steps".into(), res.log.len().into());
    if let Some(last) = res.log.last() {
        s.insert("final_loss".into(), last.total.into());
    }
    Ok(())
}

fn report_summary(reports: &[ExitReport]) -> Value {
    reports.iter().map(|r| json!({"exit": r.exit, "task": r.task, "gflops": r.gflops, "metrics": r.metrics})).collect()
}

struct Run<'a> {
    cfg: &'a RunConfig,
    exits: Vec<usize>,
    out: Outputs,
    inputs: Vec<PathBuf>,
}

impl Run<'_> {
    fn input(&mut self, p: &Path) -> PathBuf {
        let p = p.to_path_buf();
        if !self.inputs.contains(&p) {
            self.inputs.push(p.clone());
        }
        p
    }

    fn vocab(&mut self, data: &Path) -> Result<Vocab, Failure> {
        Ok(Vocab::load(require(&self.input(&data.join(VOCAB)))?)?)
    }

    /// The requested exits, or every exit of `cfg` for `--exits all`.
    fn exits_of(&self, cfg: &EncoderConfig) -> Result<Vec<usize>, Failure> {
        if self.exits.is_empty() {
            Ok(cfg.exits.clone())
        } else {
            Ok(resolve_exits(cfg, &self.exits)?)
        }
    }

    fn eval_opts(&self, cfg: &EncoderConfig, task: &str) -> Result<EvalOptions, Failure> {
        Ok(EvalOptions {
            exits: self.exits_of(cfg)?,
            n_distractors: self.cfg.eval.n_distractors,
            seed: self.cfg.seed,
            max_len: self.cfg.eval.max_len,
            task: task.to_string(),
        })
    }
}

fn gen(run: &mut Run, repos: Option<usize>) -> Result<Summary, Failure> {
    let g = &run.cfg.gen;
    let seed = run.cfg.seed;
    let corpus = gen_corpus(seed, repos.unwrap_or(g.repos), g.snippets_per_repo, &g.langs)?;
    let (corpus, planted) = if g.plant_rate > 0.0 {
        plant_near_duplicates(&corpus, g.plant_rate, seed.wrapping_add(PLANT_SEED_OFFSET))?
    } else {
        (corpus, Vec::new())
    };
    let triplets = if g.triplets > 0 { gen_triplets(seed.wrapping_add(TRIPLET_SEED_OFFSET), g.triplets, &g.langs)? } else { Vec::new() };
    let pairs =
        if g.clone_pairs > 0 { gen_clone_pairs(seed.wrapping_add(CLONE_SEED_OFFSET), g.clone_pairs, &g.langs)? } else { Vec::new() };

    let mut texts: Vec<&str> = corpus.iter().map(|s| s.text.as_str()).collect();
    for t in &triplets {
        texts.extend([t.nl.as_str(), t.code_a.text.as_str(), t.code_b.text.as_str()]);
    }
    for p in &pairs {
        texts.extend([p.a.text.as_str(), p.b.text.as_str()]);
    }
    texts.extend([INSTRUCTION_T2C, INSTRUCTION_C2C]);
    let vocab = Vocab::build(texts, g.max_vocab)?;

    write_jsonl(&mut run.out, CORPUS, &corpus)?;
    write_jsonl(&mut run.out, TRIPLETS, &triplets)?;
    write_jsonl(&mut run.out, CLONE_PAIRS, &pairs)?;
    let vp = run.out.path(VOCAB);
    with_atomic(&vp, |tmp| Ok(vocab.save(tmp)?))?;
    write_json(&mut run.out, PLANTED, &planted)?;

    let mut s = Summary::new();
    s.insert("snippets".into(), corpus.len().into());
    s.insert("repos".into(), repos.unwrap_or(g.repos).into());
    s.insert("triplets".into(), triplets.len().into());
    s.insert("clone_pairs".into(), pairs.len().into());
    s.insert("planted".into(), planted.len().into());
    s.insert("vocab_size".into(), vocab.len().into());
    Ok(s)
}

fn dedup(run: &mut Run, data: &Path) -> Result<Summary, Failure> {
    let corpus: Vec<Snippet> = read_jsonl(&run.input(&data.join(CORPUS)))?;
    let triplets: Vec<Triplet> = read_jsonl(&run.input(&data.join(TRIPLETS)))?;
    let outcome = lsh_dedup(&corpus, &run.cfg.dedup)?;
    let (kept_triplets, removed_triplets) = dedup_triplets(&triplets, &run.cfg.dedup)?;

    #[derive(Serialize)]
    struct Removed<'a> {
        kind: &'a str,
        removed: &'a str,
        kept: &'a str,
    }
    let removed: Vec<Removed> = outcome
        .removed
        .iter()
        .map(|(r, k)| Removed { kind: "snippet", removed: r, kept: k })
        .chain(removed_triplets.iter().map(|(r, k)| Removed { kind: "triplet", removed: r, kept: k }))
        .collect();
    write_jsonl(&mut run.out, CORPUS, &outcome.kept)?;
    write_jsonl(&mut run.out, TRIPLETS, &kept_triplets)?;
    write_jsonl(&mut run.out, REMOVED, &removed)?;
    // carry the rest of the data directory over so the output is usable downstream
    for name in [VOCAB, CLONE_PAIRS, PLANTED] {
        let src = data.join(name);
        if src.exists() {
            let bytes = std::fs::read(run.input(&src)).map_err(mk(Failure::data, name))?;
            run.out.write(name, &bytes)?;
        }
    }
    let mut s = Summary::new();
    s.insert("snippets_kept".into(), outcome.kept.len().into());
    s.insert("snippets_removed".into(), outcome.removed.len().into());
    s.insert("triplets_kept".into(), kept_triplets.len().into());
    s.insert("triplets_removed".into(), removed_triplets.len().into());
    Ok(s)
}

fn pretrain_cmd<T: Scalar>(run: &mut Run, data: &Path, init: Option<&Path>) -> Result<Summary, Failure> {
    let corpus: Vec<Snippet> = read_jsonl(&run.input(&data.join(CORPUS)))?;
    let vocab = run.vocab(data)?;
    if let Some(p) = init {
        run.input(p);
    }
    let ckpt = start_ckpt::<T>(init, run.cfg, &vocab)?;
    let stage: &StageConfig = &run.cfg.pretrain;
    let pool = RepoPool::new(&corpus, &vocab);
    let res = pretrain(ckpt, &pool, &stage.plan, &stage.optimizer())?;
    let acc = pretrain_accuracy(&res.ckpt, &pool, &stage.plan, PRETRAIN_EVAL_BATCHES, run.cfg.seed)?;
    let mut s = Summary::new();
    save_training(&mut run.out, &res, &mut s)?;
    let acc: BTreeMap<String, Value> = acc
        .iter()
        .map(|(e, a)| (e.to_string(), json!({"mlm": a.mlm(), "icc": a.binary()})))
        .collect();
    s.insert("accuracy".into(), json!(acc));
    Ok(s)
}

fn finetune_cmd<T: Scalar>(run: &mut Run, task: Task, data: &Path, init: Option<&Path>) -> Result<Summary, Failure> {
    let vocab = run.vocab(data)?;
    if let Some(p) = init {
        run.input(p);
    }
    let ckpt = start_ckpt::<T>(init, run.cfg, &vocab)?;
    let res = match task {
        Task::Retrieval => {
            let triplets: Vec<Triplet> = read_jsonl(&run.input(&data.join(TRIPLETS)))?;
            let st = &run.cfg.retrieval;
            finetune_retrieval(ckpt, &triplets, &vocab, &st.plan, &st.optimizer())?
        }
        Task::Clone => {
            let pairs: Vec<ClonePair> = read_jsonl(&run.input(&data.join(CLONE_PAIRS)))?;
            let st = &run.cfg.clone;
            finetune_clone(ckpt, &pairs, &vocab, &st.plan, &st.optimizer())?
        }
    };
    let mut s = Summary::new();
    save_training(&mut run.out, &res, &mut s)?;
    Ok(s)
}

fn embed_cmd<T: Scalar>(run: &mut Run, data: &Path, ckpt_path: &Path, source: EmbedSource) -> Result<Summary, Failure> {
    let vocab = run.vocab(data)?;
    let ckpt = load_ckpt::<T>(&run.input(ckpt_path))?;
    check_vocab(&ckpt, &vocab)?;
    let (ids, texts): (Vec<String>, Vec<String>) = match source {
        EmbedSource::Triplets => {
            let triplets: Vec<Triplet> = read_jsonl(&run.input(&data.join(TRIPLETS)))?;
            let (queries, pool) = t2c_task(&triplets);
            queries
                .into_iter()
                .map(|q| (format!("{}#nl", q.id), q.text))
                .chain(pool.into_iter().map(|p| (format!("{}#code", p.id), p.text)))
                .unzip()
        }
        EmbedSource::Corpus => {
            let corpus: Vec<Snippet> = read_jsonl(&run.input(&data.join(CORPUS)))?;
            corpus.into_iter().map(|s| (s.id, s.text)).unzip()
        }
    };
    let exits = run.exits_of(&ckpt.config)?;
    let vecs = embed_texts(&ckpt, &vocab, &texts, &exits, run.cfg.eval.max_len)?;
    for (e, vs) in &vecs {
        let records: Vec<EmbeddingRecord> =
            ids.iter().zip(vs).map(|(id, v)| EmbeddingRecord { id: id.clone(), vector: v.to_vec() }).collect();
        write_jsonl(&mut run.out, &format!("embeddings_exit{e}.jsonl"), &records)?;
    }
    let mut s = Summary::new();
    s.insert("texts".into(), texts.len().into());
    s.insert("exits".into(), json!(exits));
    Ok(s)
}

fn eval_cmd<T: Scalar>(run: &mut Run, task: Task, data: &Path, ckpt_path: &Path) -> Result<Summary, Failure> {
    let vocab = run.vocab(data)?;
    let ckpt = load_ckpt::<T>(&run.input(ckpt_path))?;
    check_vocab(&ckpt, &vocab)?;
    let reports = match task {
        Task::Retrieval => {
            let triplets: Vec<Triplet> = read_jsonl(&run.input(&data.join(TRIPLETS)))?;
            let mut all = Vec::new();
            for (name, (q, p)) in [("t2c", t2c_task(&triplets)), ("c2c", c2c_task(&triplets))] {
                all.extend(retrieval_eval(&ckpt, &vocab, &q, &p, &run.eval_opts(&ckpt.config, name)?)?);
            }
            all
        }
        Task::Clone => {
            let pairs: Vec<ClonePair> = read_jsonl(&run.input(&data.join(CLONE_PAIRS)))?;
            clone_eval(&ckpt, &vocab, &pairs, &run.eval_opts(&ckpt.config, "clone")?, run.cfg.eval.clone_threshold)?
                .into_iter()
                .map(|(r, _)| r)
                .collect()
        }
    };
    write_json(&mut run.out, REPORTS, &reports)?;
    let mut s = Summary::new();
    s.insert("reports".into(), report_summary(&reports));
    Ok(s)
}

fn read_reports(run: &mut Run, paths: &[PathBuf]) -> Result<Vec<ExitReport>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(require(&run.input(p))?).map_err(mk(Failure::data, "reports"))?;
        let rs: Vec<ExitReport> =
            serde_json::from_str(&text).map_err(|e| Failure::data(format!("malformed reports {}: {e}", p.display())))?;
        out.extend(rs);
    }
    Ok(out)
}

fn report_cmd(run: &mut Run, reports: &[PathBuf], baselines: &[PathBuf]) -> Result<Summary, Failure> {
    let multi = read_reports(run, reports)?;
    let single = read_reports(run, baselines)?;
    let deltas = distillation_deltas(&multi, &single);
    let mut rows = multi.clone();
    rows.extend(single.iter().map(|r| ExitReport { task: format!("{}_{SINGLE_EXIT_SUFFIX}", r.task), ..r.clone() }));
    rows.extend(deltas.iter().cloned());
    let csv = run.out.path(TRADEOFF_CSV);
    let plot = run.out.path(TRADEOFF_PLOT);
    with_atomic(&csv, |csv_tmp| with_atomic(&plot, |plot_tmp| Ok(tradeoff_report(&rows, csv_tmp, plot_tmp)?)))?;
    let mut s = Summary::new();
    s.insert("rows".into(), rows.len().into());
    s.insert("deltas".into(), deltas.len().into());
    Ok(s)
}

fn permtest_cmd<T: Scalar>(run: &mut Run, data: &Path, ckpt_path: &Path) -> Result<Summary, Failure> {
    let vocab = run.vocab(data)?;
    let ckpt = load_ckpt::<T>(&run.input(ckpt_path))?;
    check_vocab(&ckpt, &vocab)?;
    let triplets: Vec<Triplet> = read_jsonl(&run.input(&data.join(TRIPLETS)))?;
    let (q, p) = t2c_task(&triplets);
    let exits = run.exits_of(&ckpt.config)?;
    let scores = positive_pair_scores(&ckpt, &vocab, &q, &p, &exits, run.cfg.eval.max_len)?;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let mut records = Vec::new();
    for (i, &a) in exits.iter().enumerate() {
        for &b in &exits[i + 1..] {
            let r = permutation_test(&scores[&a], &scores[&b], run.cfg.eval.n_perm, run.cfg.eval.alpha, run.cfg.seed)?;
            records.push(PermtestRecord {
                exit_a: a,
                exit_b: b,
                mean_a: mean(&scores[&a]),
                mean_b: mean(&scores[&b]),
                statistic: r.statistic,
                p_value: r.p_value,
                reject: r.reject,
            });
        }
    }
    write_json(&mut run.out, PERMTEST, &records)?;
    let mut s = Summary::new();
    s.insert("comparisons".into(), records.len().into());
    s.insert("rejected".into(), records.iter().filter(|r| r.reject).count().into());
    Ok(s)
}

fn selfcheck_cmd(run: &mut Run) -> Result<Summary, Failure> {
    let outcomes = selfcheck::run_all(run.cfg.seed);
    write_json(&mut run.out, SELFCHECK, &outcomes)?;
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    for o in &outcomes {
        log::info!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    if !failed.is_empty() {
        return Err(Failure::numeric(format!("selfcheck failed: {}", failed.join(", "))));
    }
    let mut s = Summary::new();
    s.insert("checks".into(), json!(outcomes));
    Ok(s)
}

fn dispatch<T: Scalar>(run: &mut Run, cmd: &Cmd) -> Result<Summary, Failure> {
    match cmd {
        Cmd::Gen { repos } => gen(run, *repos),
        Cmd::Dedup { data } => dedup(run, data),
        Cmd::Pretrain { data, init } => pretrain_cmd::<T>(run, data, init.as_deref()),
        Cmd::Finetune { task, data, ckpt } => finetune_cmd::<T>(run, *task, data, ckpt.as_deref()),
        Cmd::Embed { data, ckpt, source } => embed_cmd::<T>(run, data, ckpt, *source),
        Cmd::Eval { task, data, ckpt } => eval_cmd::<T>(run, *task, data, ckpt),
        Cmd::Report { reports, baselines } => report_cmd(run, reports, baselines),
        Cmd::Permtest { data, ckpt } => permtest_cmd::<T>(run, data, ckpt),
        Cmd::Selfcheck => selfcheck_cmd(run),
        Cmd::Replay { .. } => Err(Failure::usage("replay cannot be nested")),
    }
}

pub fn execute(cli: &Cli, argv: &[String], ctx: Ctx) -> Result<Summary, Failure> {
    if let Cmd::Replay { manifest } = &cli.cmd {
        return replay(manifest, cli.common.out.as_deref());
    }
    if cli.common.threads == 0 {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    if cli.common.threads > 1 {
        log::warn!("--threads {} requested; every stage runs on a single worker", cli.common.threads);
    }
    let c = &cli.common;
    let cfg = resolve(c.config.as_deref(), &c.sets, c.seed)?;
    let exits = parse_exits(&c.exits)?;
    let out_dir = c.out.clone().ok_or_else(|| Failure::usage("--out is required"))?;
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut run = Run { cfg: &cfg, exits, out: Outputs::create(&out_dir)?, inputs: Vec::new() };
    if let Some(p) = &c.config {
        run.input(p);
    }
    let mut summary =
        if ctx.check_mode { dispatch::<f64>(&mut run, &cli.cmd)? } else { dispatch::<f32>(&mut run, &cli.cmd)? };

    let manifest = RunManifest {
        command: cli.cmd.name().to_string(),
        argv: argv.to_vec(),
        cwd: std::env::current_dir().map_err(mk(Failure::data, "cwd"))?,
        config: cfg.clone(),
        seed: cfg.seed,
        check_mode: ctx.check_mode,
        inputs: run.inputs.clone(),
        out_dir: out_dir.clone(),
        outputs: run.out.hashes()?,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    manifest.save(&out_dir)?;
    summary.insert("out".into(), out_dir.display().to_string().into());
    summary.insert("seed".into(), cfg.seed.into());
    summary.insert("check_mode".into(), ctx.check_mode.into());
    Ok(summary)
}

/// `argv` with its `--out` replaced by `out`.
fn with_out(argv: &[String], out: &Path) -> Vec<String> {
    let mut v = Vec::with_capacity(argv.len() + 2);
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
        } else if a == "--out" {
            skip = true;
        } else if !a.starts_with("--out=") {
            v.push(a.clone());
        }
    }
    v.push("--out".into());
    v.push(out.display().to_string());
    v
}

fn replay(path: &Path, out: Option<&Path>) -> Result<Summary, Failure> {
    use clap::Parser;
    let m = RunManifest::load(require(path)?)?;
    if m.command == "replay" {
        return Err(Failure::usage("manifest records a replay"));
    }
    let scratch;
    let out_dir = match out {
        Some(p) => std::path::absolute(p).map_err(mk(Failure::usage, "--out"))?,
        None => {
            scratch = tempfile::tempdir().map_err(mk(Failure::data, "scratch directory"))?;
            scratch.path().to_path_buf()
        }
    };
    let argv = with_out(&m.argv, &out_dir);
    let cli = Cli::try_parse_from(std::iter::once("mosekit".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| Failure::data(format!("manifest argv does not parse: {e}")))?;
    std::env::set_current_dir(&m.cwd).map_err(|e| Failure::data(format!("cannot enter {}: {e}", m.cwd.display())))?;
    execute(&cli, &argv, Ctx { check_mode: m.check_mode })?;

    let fresh = RunManifest::load(&out_dir.join(MANIFEST_FILE))?;
    let mut mismatched = Vec::new();
    for o in &m.outputs {
        match fresh.outputs.iter().find(|f| f.path == o.path) {
            Some(f) if f.sha256 == o.sha256 => {}
            _ => mismatched.push(o.path.clone()),
        }
    }
    if fresh.outputs.len() != m.outputs.len() {
        mismatched.push("<output set>".into());
    }
    if !mismatched.is_empty() {
        return Err(Failure::numeric(format!("replay differs in {}", mismatched.join(", "))));
    }
    let mut s = Summary::new();
    s.insert("replayed".into(), m.command.into());
    s.insert("outputs_matched".into(), m.outputs.len().into());
    s.insert("out".into(), out_dir.display().to_string().into());
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_flag_is_replaced() {
        let argv: Vec<String> = ["gen", "--out", "a", "--seed", "3", "--out=b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(with_out(&argv, Path::new("/x")), ["gen", "--seed", "3", "--out", "/x"]);
    }

    #[test]
    fn exits_parse() {
        assert_eq!(parse_exits("all").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_exits("1, 4,8").unwrap(), [1, 4, 8]);
        assert_eq!(parse_exits("x").unwrap_err().code, Failure::USAGE);
    }
}
