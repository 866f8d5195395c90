//! Per-exit evaluation: exact embedding search, ranking metrics, clone
//! classification scores, FLOPs accounting, trade-off reports and the
//! cross-exit permutation test.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClonePair, Triplet};
use crate::model::{forward_batch, l2_normalize, project, Checkpoint, EncoderConfig, Scalar, TokenBatch};
use crate::packing::{pack_single, PackedExample};
use crate::tokenizer::Vocab;
use crate::training::{pack_clone_pairs, INSTRUCTION_C2C, INSTRUCTION_T2C};
use crate::{derive_rng, Error, Result};

/// Desk default number of distractors per query.
pub const DEFAULT_DISTRACTORS: usize = 99;
/// Distractor count of the reference protocol.
pub const FULL_DISTRACTORS: usize = 999;
pub const DEFAULT_N_PERM: usize = 10_000;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_CLONE_THRESHOLD: f64 = 0.5;
/// Sequences embedded per forward pass.
pub const EMBED_BATCH: usize = 32;

/// Columns of the trade-off CSV, in order.
pub const REPORT_COLUMNS: [&str; 11] =
    ["exit", "task", "gflops", "mrr", "ndcg", "map", "recall_at_1", "recall_at_5", "precision", "recall", "f1"];

/// One query's candidates ordered by descending similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: String,
    pub candidates: Vec<String>,
    pub relevant: BTreeSet<String>,
}

impl RankedList {
    /// Checks that candidates are distinct and contain every relevant id.
    pub fn new(query: impl Into<String>, candidates: Vec<String>, relevant: BTreeSet<String>) -> Result<Self> {
        let query = query.into();
        let uniq: BTreeSet<&String> = candidates.iter().collect();
        if uniq.len() != candidates.len() {
            return Err(Error::invalid(format!("ranked list for {query} has duplicate candidates")));
        }
        if relevant.is_empty() {
            return Err(Error::invalid(format!("ranked list for {query} has no relevant item")));
        }
        if let Some(r) = relevant.iter().find(|r| !uniq.contains(r)) {
            return Err(Error::invalid(format!("relevant id {r} is not a candidate of {query}")));
        }
        Ok(Self { query, candidates, relevant })
    }

    /// 1-based ranks of the relevant items.
    fn relevant_ranks(&self) -> impl Iterator<Item = usize> + '_ {
        self.candidates.iter().enumerate().filter(|(_, c)| self.relevant.contains(*c)).map(|(i, _)| i + 1)
    }

    fn first_rank(&self) -> usize {
        self.relevant_ranks().next().expect("relevant set is a non-empty subset of candidates")
    }
}

/// Metrics of one task at one exit together with its inference cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitReport {
    pub exit: usize,
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub gflops: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn mrr(lists: &[RankedList]) -> f64 {
    mean(lists.iter().map(|l| 1.0 / l.first_rank() as f64))
}

/// Binary-gain NDCG with one relevant item: `1/log2(rank + 1)`.
pub fn ndcg_binary(lists: &[RankedList]) -> f64 {
    mean(lists.iter().map(|l| 1.0 / (l.first_rank() as f64 + 1.0).log2()))
}

/// Mean average precision over every relevant item of every list.
pub fn map_multi(lists: &[RankedList]) -> f64 {
    mean(lists.iter().map(|l| {
        let ap: f64 = l.relevant_ranks().enumerate().map(|(hit, rank)| (hit + 1) as f64 / rank as f64).sum();
        ap / l.relevant.len() as f64
    }))
}

/// Fraction of relevant items found in the top `k`, averaged over lists.
pub fn recall_at_k(lists: &[RankedList], k: usize) -> f64 {
    mean(lists.iter().map(|l| l.relevant_ranks().filter(|&r| r <= k).count() as f64 / l.relevant.len() as f64))
}

/// `mrr`, `ndcg`, `map`, `recall_at_1` and `recall_at_5` of a list set.
pub fn ranking_metrics(lists: &[RankedList]) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("mrr".to_string(), mrr(lists)),
        ("ndcg".to_string(), ndcg_binary(lists)),
        ("map".to_string(), map_multi(lists)),
        ("recall_at_1".to_string(), recall_at_k(lists, 1)),
        ("recall_at_5".to_string(), recall_at_k(lists, 5)),
    ])
}

/// Exact cosine index over unit vectors.
#[derive(Debug, Clone)]
pub struct Index {
    ids: Vec<String>,
    vecs: Array2<f64>,
}

impl Index {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

const UNIT_TOL: f64 = 1e-6;

fn check_unit(id: &str, v: ArrayView1<f64>) -> Result<()> {
    let n = v.dot(&v).sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::invalid(format!("vector {id} has norm {n}, expected unit norm")));
    }
    Ok(())
}

pub fn build_index(embeddings: &[(String, Array1<f64>)]) -> Result<Index> {
    let dim = embeddings.first().map_or(0, |(_, v)| v.len());
    let mut vecs = Array2::zeros((embeddings.len(), dim));
    let mut seen = BTreeSet::new();
    for (i, (id, v)) in embeddings.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::invalid(format!("vector {id} has dimension {} instead of {dim}", v.len())));
        }
        if !seen.insert(id) {
            return Err(Error::invalid(format!("duplicate id {id} in index")));
        }
        check_unit(id, v.view())?;
        vecs.row_mut(i).assign(v);
    }
    Ok(Index { ids: embeddings.iter().map(|(id, _)| id.clone()).collect(), vecs })
}

/// Orders `(id, score)` by descending score, then ascending id.
fn rank_scores(scored: &mut [(String, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Top `k` ids by cosine similarity; `k` beyond the index size returns all.
pub fn search(index: &Index, query: ArrayView1<f64>, k: usize) -> Result<Vec<(String, f64)>> {
    if query.len() != index.vecs.ncols() && !index.is_empty() {
        return Err(Error::invalid("query dimension does not match the index"));
    }
    check_unit("query", query)?;
    let scores = index.vecs.dot(&query);
    let mut scored: Vec<(String, f64)> = index.ids.iter().cloned().zip(scores).collect();
    rank_scores(&mut scored);
    scored.truncate(k);
    Ok(scored)
}

/// Unit-norm embeddings of `texts` at each requested exit, computed with one
/// forward per batch up to the deepest exit.
pub fn embed_texts<T: Scalar>(
    ckpt: &Checkpoint<T>,
    vocab: &Vocab,
    texts: &[String],
    exits: &[usize],
    max_len: usize,
) -> Result<BTreeMap<usize, Vec<Array1<f64>>>> {
    let up_to = resolve_exits(&ckpt.config, exits)?.into_iter().max().expect("non-empty exit list");
    let mut out: BTreeMap<usize, Vec<Array1<f64>>> = exits.iter().map(|&e| (e, Vec::with_capacity(texts.len()))).collect();
    for chunk in texts.chunks(EMBED_BATCH) {
        let packed: Vec<PackedExample> = chunk.iter().map(|t| pack_single(&vocab.encode(t), max_len)).collect::<Result<_>>()?;
        let batch = TokenBatch::from_examples(&packed)?.trim_leading_padding();
        let (states, _) = forward_batch(ckpt, &batch, up_to)?;
        for (&e, dst) in out.iter_mut() {
            let pooled = &states.get(e)?.pooled;
            for row in pooled.outer_iter() {
                let v = project(ckpt, row, e)?;
                dst.push(v.mapv(|x| x.to_f64().expect("finite")));
            }
        }
    }
    Ok(out)
}

/// Checks that every exit is in the checkpoint's exit set; an empty request
/// is an error.
pub fn resolve_exits(cfg: &EncoderConfig, exits: &[usize]) -> Result<Vec<usize>> {
    if exits.is_empty() {
        return Err(Error::invalid("no exits requested"));
    }
    for &e in exits {
        cfg.exit_slot(e)?;
    }
    let mut v = exits.to_vec();
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

/// A retrieval query and the pool id of its target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub id: String,
    pub text: String,
    pub target: String,
}

/// A pool entry to be retrieved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolItem {
    pub id: String,
    pub text: String,
}

/// Natural-language-to-code queries and their code pool. Query texts carry
/// the text-to-code instruction prefix.
pub fn t2c_task(triplets: &[Triplet]) -> (Vec<RetrievalQuery>, Vec<PoolItem>) {
    let queries = triplets
        .iter()
        .map(|t| RetrievalQuery { id: t.id.clone(), text: format!("{INSTRUCTION_T2C} {}", t.nl), target: t.id.clone() })
        .collect();
    let pool = triplets.iter().map(|t| PoolItem { id: t.id.clone(), text: t.code_a.text.clone() }).collect();
    (queries, pool)
}

/// Code-to-code queries (first language) against a pool of their
/// translations.
pub fn c2c_task(triplets: &[Triplet]) -> (Vec<RetrievalQuery>, Vec<PoolItem>) {
    let queries = triplets
        .iter()
        .map(|t| RetrievalQuery {
            id: t.id.clone(),
            text: format!("{INSTRUCTION_C2C} {}", t.code_a.text),
            target: t.id.clone(),
        })
        .collect();
    let pool = triplets.iter().map(|t| PoolItem { id: t.id.clone(), text: t.code_b.text.clone() }).collect();
    (queries, pool)
}

/// Settings shared by the evaluation entry points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub exits: Vec<usize>,
    pub n_distractors: usize,
    pub seed: u64,
    pub max_len: usize,
    pub task: String,
}

/// Candidate sets: each query's target plus `n` distractors drawn uniformly
/// without replacement from the rest of the pool. Returns pool indices.
pub fn sample_candidates(
    queries: &[RetrievalQuery],
    pool: &[PoolItem],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let pos: BTreeMap<&str, usize> = pool.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    if pos.len() != pool.len() {
        return Err(Error::Data("duplicate pool ids".into()));
    }
    if pool.len() < n + 1 {
        return Err(Error::Data(format!("pool of {} cannot supply {n} distractors plus a target", pool.len())));
    }
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let &t = pos
                .get(q.target.as_str())
                .ok_or_else(|| Error::Data(format!("target {} of query {} is not in the pool", q.target, q.id)))?;
            let mut rng = derive_rng(seed, qi as u64);
            let mut cands = vec![t];
            // draw from the pool with the target removed
            cands.extend(sample(&mut rng, pool.len() - 1, n).into_iter().map(|i| if i >= t { i + 1 } else { i }));
            Ok(cands)
        })
        .collect()
}

/// Ranks each query's candidates by cosine similarity.
pub fn rank_candidates(
    queries: &[RetrievalQuery],
    pool: &[PoolItem],
    candidates: &[Vec<usize>],
    query_vecs: &[Array1<f64>],
    pool_vecs: &[Array1<f64>],
) -> Result<Vec<RankedList>> {
    queries
        .iter()
        .zip(candidates)
        .zip(query_vecs)
        .map(|((q, cands), qv)| {
            let mut scored: Vec<(String, f64)> = cands.iter().map(|&i| (pool[i].id.clone(), pool_vecs[i].dot(qv))).collect();
            rank_scores(&mut scored);
            let ids = scored.into_iter().map(|(id, _)| id).collect();
            RankedList::new(q.id.clone(), ids, BTreeSet::from([q.target.clone()]))
        })
        .collect()
}

/// Per-exit retrieval metrics with seeded distractor sampling.
pub fn retrieval_eval<T: Scalar>(
    ckpt: &Checkpoint<T>,
    vocab: &Vocab,
    queries: &[RetrievalQuery],
    pool: &[PoolItem],
    opts: &EvalOptions,
) -> Result<Vec<ExitReport>> {
    Ok(retrieval_eval_lists(ckpt, vocab, queries, pool, opts)?.into_iter().map(|(r, _)| r).collect())
}

/// [`retrieval_eval`] that also returns the ranked lists of every exit.
pub fn retrieval_eval_lists<T: Scalar>(
    ckpt: &Checkpoint<T>,
    vocab: &Vocab,
    queries: &[RetrievalQuery],
    pool: &[PoolItem],
    opts: &EvalOptions,
) -> Result<Vec<(ExitReport, Vec<RankedList>)>> {
    let exits = resolve_exits(&ckpt.config, &opts.exits)?;
    let candidates = sample_candidates(queries, pool, opts.n_distractors, opts.seed)?;
    let q_texts: Vec<String> = queries.iter().map(|q| q.text.clone()).collect();
    let p_texts: Vec<String> = pool.iter().map(|p| p.text.clone()).collect();
    let qv = embed_texts(ckpt, vocab, &q_texts, &exits, opts.max_len)?;
    let pv = embed_texts(ckpt, vocab, &p_texts, &exits, opts.max_len)?;
    let flops = flops_per_exit(&ckpt.config, opts.max_len);
    exits
        .iter()
        .map(|e| {
            let lists = rank_candidates(queries, pool, &candidates, &qv[e], &pv[e])?;
            let report = ExitReport { exit: *e, task: opts.task.clone(), metrics: ranking_metrics(&lists), gflops: flops[e] };
            Ok((report, lists))
        })
        .collect()
}

/// Cosine similarity of each query with its own target, per exit.
pub fn positive_pair_scores<T: Scalar>(
    ckpt: &Checkpoint<T>,
    vocab: &Vocab,
    queries: &[RetrievalQuery],
    pool: &[PoolItem],
    exits: &[usize],
    max_len: usize,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let exits = resolve_exits(&ckpt.config, exits)?;
    let by_id: BTreeMap<&str, &PoolItem> = pool.iter().map(|p| (p.id.as_str(), p)).collect();
    let targets: Vec<String> = queries
        .iter()
        .map(|q| {
            by_id
                .get(q.target.as_str())
                .map(|p| p.text.clone())
                .ok_or_else(|| Error::Data(format!("target {} is not in the pool", q.target)))
        })
        .collect::<Result<_>>()?;
    let q_texts: Vec<String> = queries.iter().map(|q| q.text.clone()).collect();
    let qv = embed_texts(ckpt, vocab, &q_texts, &exits, max_len)?;
    let tv = embed_texts(ckpt, vocab, &targets, &exits, max_len)?;
    Ok(exits.iter().map(|e| (*e, qv[e].iter().zip(&tv[e]).map(|(a, b)| a.dot(b)).collect())).collect())
}

/// Confusion counts and derived scores of a binary classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

pub fn classification_metrics(predicted: &[bool], labels: &[bool]) -> Result<ClassificationMetrics> {
    if predicted.len() != labels.len() {
        return Err(Error::invalid("prediction and label counts differ"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in predicted.iter().zip(labels) {
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut undefined = false;
    let mut ratio = |num: f64, den: f64| {
        if den == 0.0 {
            undefined = true;
            0.0
        } else {
            num / den
        }
    };
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fn_) as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Ok(ClassificationMetrics { tp, fp, tn, fn_, precision, recall, f1, undefined })
}

impl ClassificationMetrics {
    fn to_map(self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("precision".to_string(), self.precision),
            ("recall".to_string(), self.recall),
            ("f1".to_string(), self.f1),
        ])
    }
}

/// Clone-detection precision/recall/F1 of each exit's classifier. A pair is
/// predicted a clone when its probability is at least `threshold`.
pub fn clone_eval<T: Scalar>(
    ckpt: &Checkpoint<T>,
    vocab: &Vocab,
    pairs: &[ClonePair],
    opts: &EvalOptions,
    threshold: f64,
) -> Result<Vec<(ExitReport, ClassificationMetrics)>> {
    let exits = resolve_exits(&ckpt.config, &opts.exits)?;
    let (packed, labels) = pack_clone_pairs(pairs, vocab, opts.max_len)?;
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        log::warn!("clone evaluation set lacks a positive or a negative pair; undefined ratios are reported as 0");
    }
    let up_to = *exits.last().expect("non-empty");
    let mut probs: BTreeMap<usize, Vec<f64>> = exits.iter().map(|&e| (e, Vec::new())).collect();
    for chunk in packed.chunks(EMBED_BATCH) {
        let batch = TokenBatch::from_examples(chunk)?.trim_leading_padding();
        let (states, _) = forward_batch(ckpt, &batch, up_to)?;
        for (&e, dst) in probs.iter_mut() {
            let z = crate::model::clone_logit(ckpt, &states, e)?;
            dst.extend(z.iter().map(|v| crate::objectives::sigmoid(v.to_f64().expect("finite"))));
        }
    }
    let flops = flops_per_exit(&ckpt.config, opts.max_len);
    exits
        .iter()
        .map(|e| {
            let pred: Vec<bool> = probs[e].iter().map(|&p| p >= threshold).collect();
            let m = classification_metrics(&pred, &labels)?;
            if m.undefined {
                log::warn!("exit {e}: precision, recall or F1 undefined, reported as 0");
            }
            Ok((ExitReport { exit: *e, task: opts.task.clone(), metrics: m.to_map(), gflops: flops[e] }, m))
        })
        .collect()
}

/// Floating-point operations of one encoder layer on `seq` tokens, counting
/// a multiply-add as two operations.
pub fn layer_flops(cfg: &EncoderConfig, seq: usize) -> f64 {
    let (n, d, kv, f) = (seq as f64, cfg.hidden as f64, cfg.kv_dim() as f64, cfg.intermediate as f64);
    let qkv = 2.0 * n * d * (d + 2.0 * kv);
    let logits = 2.0 * n * n * d;
    let weighted = 2.0 * n * n * d;
    let out = 2.0 * n * d * d;
    let mlp = 2.0 * 2.0 * n * d * f;
    qkv + logits + weighted + out + mlp
}

/// Cost of reading out one exit: projecting the pooled vector.
pub fn exit_head_flops(cfg: &EncoderConfig) -> f64 {
    2.0 * cfg.hidden as f64 * cfg.proj_dim as f64
}

/// GFLOPs of a forward pass that stops at each exit.
pub fn flops_per_exit(cfg: &EncoderConfig, seq: usize) -> BTreeMap<usize, f64> {
    let per_layer = layer_flops(cfg, seq);
    cfg.exits.iter().map(|&e| (e, (e as f64 * per_layer + exit_head_flops(cfg)) / 1e9)).collect()
}

/// Outcome of a two-sample permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Permutation test of `|mean(a) - mean(b)|` under label shuffling with
/// `p = (1 + #{permuted >= observed}) / (n_perm + 1)`.
pub fn permutation_test(a: &[f64], b: &[f64], n_perm: usize, alpha: f64, seed: u64) -> Result<PermutationResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("permutation test needs two non-empty samples"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    // a canonical order of the two samples makes the result symmetric in (a, b)
    let (x, y) = if lex_cmp(&sa, &sb).is_gt() { (sb, sa) } else { (sa, sb) };
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let total: f64 = x.iter().chain(&y).sum();
    let stat = |sx: f64| (sx / nx - (total - sx) / ny).abs();
    let observed = stat(x.iter().sum());
    let tol = 1e-12 * (1.0 + observed.abs());
    let mut pooled: Vec<f64> = x.iter().chain(&y).copied().collect();
    let mut rng = derive_rng(seed, 0);
    let mut hits = 0usize;
    for _ in 0..n_perm {
        let (head, _) = pooled.partial_shuffle(&mut rng, x.len());
        if stat(head.iter().sum()) >= observed - tol {
            hits += 1;
        }
    }
    let p_value = (1 + hits) as f64 / (n_perm + 1) as f64;
    Ok(PermutationResult { statistic: observed, p_value, reject: p_value < alpha })
}

/// One point of the trade-off plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub exit: usize,
    pub gflops: f64,
    pub metric: String,
    pub value: f64,
}

/// Writes one CSV row per (exit, task), sorted by exit then task, with the
/// columns of [`REPORT_COLUMNS`] (blank where a metric does not apply), plus
/// a JSON array of plot points.
pub fn tradeoff_report(reports: &[ExitReport], csv_path: &Path, plot_path: &Path) -> Result<()> {
    let mut rows: Vec<&ExitReport> = reports.iter().collect();
    rows.sort_by(|a, b| a.exit.cmp(&b.exit).then_with(|| a.task.cmp(&b.task)));
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(REPORT_COLUMNS)?;
    let mut points = Vec::new();
    for r in &rows {
        let mut rec = vec![r.exit.to_string(), r.task.clone(), format!("{}", r.gflops)];
        for col in &REPORT_COLUMNS[3..] {
            rec.push(r.metrics.get(*col).map(|v| format!("{v}")).unwrap_or_default());
        }
        w.write_record(&rec)?;
        for (metric, &value) in &r.metrics {
            points.push(PlotPoint { exit: r.exit, gflops: r.gflops, metric: format!("{}/{metric}", r.task), value });
        }
    }
    w.flush()?;
    std::fs::write(plot_path, serde_json::to_string_pretty(&points)?)?;
    Ok(())
}

/// Suffix of the task tag of rows produced by [`distillation_deltas`].
pub const DELTA_SUFFIX: &str = "sd_delta";

/// Differences `multi - single` of every metric present in both a
/// multi-exit report and the single-exit baseline of the same exit and task.
/// Rows are tagged `<task>_sd_delta`.
pub fn distillation_deltas(multi: &[ExitReport], single: &[ExitReport]) -> Vec<ExitReport> {
    let mut out = Vec::new();
    for m in multi {
        let Some(s) = single.iter().find(|s| s.exit == m.exit && s.task == m.task) else { continue };
        let metrics = m
            .metrics
            .iter()
            .filter_map(|(k, v)| s.metrics.get(k).map(|b| (k.clone(), v - b)))
            .collect();
        let task = format!("{}_{DELTA_SUFFIX}", m.task);
        out.push(ExitReport { exit: m.exit, task, metrics, gflops: m.gflops });
    }
    out
}

/// Normalizes raw vectors for [`build_index`].
pub fn unit_vectors(raw: &[(String, Array1<f64>)]) -> Result<Vec<(String, Array1<f64>)>> {
    raw.iter().map(|(id, v)| Ok((id.clone(), l2_normalize(v.view())?.0))).collect()
}
