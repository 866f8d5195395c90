//! Invariant suite shared by the `selfcheck` command and the acceptance
//! tests: gradient check, prefix consistency, masking and ICC statistics,
//! metric oracles.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::datagen::gen_corpus;
use crate::evalkit::{map_multi, mrr, ndcg_binary, recall_at_k, RankedList};
use crate::model::{forward, Checkpoint, EncoderConfig};
use crate::objectives::alphas;
use crate::packing::{apply_mlm_mask, pack_icc, pack_pair_ids, IccLabel, PackedExample, RepoPool};
use crate::tokenizer::{build_vocab, is_special, CLS, MASK, N_SPECIAL, PAD, SEP};
use crate::training::{pretrain_loss_grad, PretrainBatch};
use crate::{seeded_rng, Result};

/// One named check with its measured value and verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

/// Depth 2, exits {1, 2}, hidden 8, vocabulary 16.
pub fn gradcheck_config() -> EncoderConfig {
    EncoderConfig::tiny(16)
}

/// A small pre-training batch of length-`seq` packs with MLM targets and
/// mixed ICC labels.
pub fn gradcheck_batch(vocab: usize, seq: usize, seed: u64) -> Result<PretrainBatch> {
    let mut rng = seeded_rng(seed);
    let mut exs = Vec::new();
    for i in 0..3 {
        let a: Vec<u32> = (0..seq / 2 - 1).map(|_| rng.random_range(N_SPECIAL..vocab as u32)).collect();
        let b: Vec<u32> = (0..seq / 2 - 2 - i % 2).map(|_| rng.random_range(N_SPECIAL..vocab as u32)).collect();
        let mut ex = pack_pair_ids(&a, &b, seq)?;
        ex.icc_label = Some(if i % 2 == 0 { IccLabel::SameRepo } else { IccLabel::CrossRepo });
        let mut m = apply_mlm_mask(&ex, 0.3, vocab, &mut rng);
        if m.mlm_targets.is_empty() {
            let pos = m.seg_bounds[0].0;
            m.mlm_targets.push((pos, m.ids[pos]));
            m.ids[pos] = MASK;
        }
        exs.push(m);
    }
    PretrainBatch::new(&exs)
}

/// Largest relative error of any tensor, with per-tensor error
/// `max_k |fd_k - an_k| / max_k max(|fd_k|, |an_k|)` over every coordinate.
/// Central differences use step `h`; the combined multi-exit loss is used.
pub fn gradient_check(seed: u64, seq: usize, h: f64) -> Result<BTreeMap<String, f64>> {
    let cfg = gradcheck_config();
    let ckpt = Checkpoint::<f64>::init(cfg.clone(), seed)?;
    let batch = gradcheck_batch(cfg.vocab_size, seq, seed)?;
    let weights = alphas(&cfg.exits, cfg.depth);
    let mut grads = ckpt.params.zeros_like();
    pretrain_loss_grad(&ckpt, &batch, &weights, Some(&mut grads))?;
    let loss = |c: &Checkpoint<f64>| pretrain_loss_grad(c, &batch, &weights, None).map(|e| e.breakdown.total);
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    let mut out = BTreeMap::new();
    let mut probe = ckpt.clone();
    for (ti, (name, an)) in analytic.iter().enumerate() {
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for (k, &a) in an.iter().enumerate() {
            let orig = probe.params.tensors_mut()[ti].1[k];
            probe.params.tensors_mut()[ti].1[k] = orig + h;
            let plus = loss(&probe)?;
            probe.params.tensors_mut()[ti].1[k] = orig - h;
            let minus = loss(&probe)?;
            probe.params.tensors_mut()[ti].1[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            diff = diff.max((fd - a).abs());
            scale = scale.max(fd.abs()).max(a.abs());
        }
        out.insert(name.clone(), if scale == 0.0 { diff } else { diff / scale });
    }
    Ok(out)
}

/// Configurations used for the prefix-consistency check.
pub fn prefix_configs() -> Vec<EncoderConfig> {
    let mut a = EncoderConfig::tiny(40);
    a.depth = 4;
    a.exits = vec![1, 3, 4];
    let mut b = EncoderConfig::desk(60);
    b.depth = 3;
    b.exits = vec![1, 2, 3];
    b.hidden = 32;
    b.intermediate = 64;
    let mut c = EncoderConfig::tiny(30);
    c.depth = 5;
    c.exits = vec![2, 5];
    c.n_heads = 4;
    c.n_kv_heads = 4;
    vec![a, b, c]
}

/// Largest elementwise gap between the states of a forward that stops at
/// each exit and the same exit's states in a full-depth forward.
pub fn prefix_consistency(n_inputs: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut rng = seeded_rng(seed);
    for (ci, cfg) in prefix_configs().into_iter().enumerate() {
        let ckpt = Checkpoint::<f64>::init(cfg.clone(), seed + ci as u64)?;
        for _ in 0..n_inputs {
            let len = rng.random_range(2..=16);
            let pad = rng.random_range(0..len - 1);
            let ids: Vec<u32> =
                (0..len).map(|i| if i < pad { PAD } else { rng.random_range(N_SPECIAL..cfg.vocab_size as u32) }).collect();
            let valid: Vec<bool> = (0..len).map(|i| i >= pad).collect();
            let full = forward(&ckpt, &ids, &valid, cfg.max_exit())?;
            for &e in &cfg.exits {
                let part = forward(&ckpt, &ids, &valid, e)?;
                let (x, y) = (&part.get(e)?.hidden, &full.get(e)?.hidden);
                for (i, (a, b)) in x.iter().zip(y).enumerate() {
                    if valid[i / cfg.hidden] {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Observed MLM corruption rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskStats {
    pub maskable: usize,
    pub selection_rate: f64,
    pub mask_share: f64,
    pub random_share: f64,
    pub keep_share: f64,
}

fn stats_pool(seed: u64) -> Result<(RepoPool, usize)> {
    let langs: Vec<String> = vec!["toyA".into(), "toyB".into(), "toyC".into()];
    let corpus = gen_corpus(seed, 8, 16, &langs)?;
    let vocab = build_vocab(&corpus, 4096)?;
    Ok((RepoPool::new(&corpus, &vocab), vocab.len()))
}

/// Masks packs until at least `min_tokens` maskable tokens have been seen.
pub fn masking_stats(min_tokens: usize, rate: f64, seed: u64) -> Result<MaskStats> {
    let (pool, vocab) = stats_pool(seed)?;
    let mut rng = seeded_rng(seed);
    let (mut seen, mut sel, mut masked, mut random, mut kept) = (0usize, 0usize, 0usize, 0usize, 0usize);
    while seen < min_tokens {
        let ex = pack_icc(&pool, 128, 0.5, &mut rng)?;
        seen += ex.maskable().count();
        let m = apply_mlm_mask(&ex, rate, vocab, &mut rng);
        for &(pos, orig) in &m.mlm_targets {
            sel += 1;
            match m.ids[pos] {
                MASK => masked += 1,
                id if id == orig => kept += 1,
                _ => random += 1,
            }
        }
    }
    let s = sel.max(1) as f64;
    Ok(MaskStats {
        maskable: seen,
        selection_rate: sel as f64 / seen as f64,
        mask_share: masked as f64 / s,
        random_share: random as f64 / s,
        keep_share: kept as f64 / s,
    })
}

/// True when a pack is left-padded, every segment is preceded by `[SEP]`
/// and the last position holds `[CLS]`.
pub fn layout_ok(ex: &PackedExample) -> bool {
    let n = ex.ids.len();
    let first_valid = ex.valid_mask.iter().position(|&v| v).unwrap_or(n);
    let left_padded = ex.valid_mask.iter().enumerate().all(|(i, &v)| v == (i >= first_valid))
        && ex.ids[..first_valid].iter().all(|&id| id == PAD);
    let segs_ok = ex.seg_bounds.len() >= 2
        && ex.seg_bounds.iter().all(|&(s, e)| s > first_valid && s < e && ex.ids[s - 1] == SEP)
        && ex.seg_bounds.iter().all(|&(s, e)| ex.ids[s..e].iter().all(|&id| !is_special(id)));
    left_padded && segs_ok && n > 0 && ex.cls_pos == n - 1 && ex.ids[n - 1] == CLS
}

/// Fraction of cross-repository packs and whether every pack had the
/// expected layout.
pub fn icc_stats(n_packs: usize, seed: u64) -> Result<(f64, bool)> {
    let (pool, _) = stats_pool(seed)?;
    let mut rng = seeded_rng(seed ^ 0x1cc);
    let (mut cross, mut all_ok) = (0usize, true);
    for _ in 0..n_packs {
        let ex = pack_icc(&pool, 128, 0.5, &mut rng)?;
        cross += usize::from(ex.icc_label == Some(IccLabel::CrossRepo));
        all_ok &= layout_ok(&ex);
    }
    Ok((cross as f64 / n_packs as f64, all_ok))
}

/// Largest gap between the library metrics and straightforward rescans on
/// `n` random lists.
pub fn metric_oracle_gap(n: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut lists = Vec::with_capacity(n);
    for q in 0..n {
        let len = rng.random_range(1..60);
        let mut c: Vec<String> = (0..len).map(|i| format!("d{i}")).collect();
        c.shuffle(&mut rng);
        let n_rel = rng.random_range(1..=len.min(4));
        let rel = c[..n_rel].iter().cloned().collect();
        c.shuffle(&mut rng);
        lists.push(RankedList::new(format!("q{q}"), c, rel)?);
    }
    let ranks = |l: &RankedList| -> Vec<usize> {
        let mut r = Vec::new();
        for (i, c) in l.candidates.iter().enumerate() {
            if l.relevant.contains(c) {
                r.push(i + 1);
            }
        }
        r
    };
    let nq = n as f64;
    let mut o_mrr = 0.0;
    let mut o_ndcg = 0.0;
    let mut o_map = 0.0;
    let mut o_r1 = 0.0;
    let mut o_r5 = 0.0;
    for l in &lists {
        let r = ranks(l);
        o_mrr += 1.0 / r[0] as f64 / nq;
        o_ndcg += 1.0 / (r[0] as f64 + 1.0).log2() / nq;
        let mut ap = 0.0;
        for (j, &rank) in r.iter().enumerate() {
            ap += (j + 1) as f64 / rank as f64;
        }
        o_map += ap / r.len() as f64 / nq;
        o_r1 += r.iter().filter(|&&x| x <= 1).count() as f64 / r.len() as f64 / nq;
        o_r5 += r.iter().filter(|&&x| x <= 5).count() as f64 / r.len() as f64 / nq;
    }
    let gaps = [
        mrr(&lists) - o_mrr,
        ndcg_binary(&lists) - o_ndcg,
        map_multi(&lists) - o_map,
        recall_at_k(&lists, 1) - o_r1,
        recall_at_k(&lists, 5) - o_r5,
    ];
    Ok(gaps.iter().fold(0.0f64, |m, g| m.max(g.abs())))
}

/// Runs every check at its stated tolerance.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    match gradient_check(seed, 12, 1e-5) {
        Ok(errs) => {
            let (worst_name, worst) =
                errs.iter().fold(("", 0.0f64), |acc, (n, &e)| if e > acc.1 { (n.as_str(), e) } else { acc });
            out.push(CheckOutcome::new(
                "gradient",
                worst <= 1e-4,
                format!("{} tensors, max relative error {worst:.2e} ({worst_name})", errs.len()),
            ));
        }
        Err(e) => out.push(CheckOutcome::new("gradient", false, e.to_string())),
    }
    match prefix_consistency(20, seed) {
        Ok(gap) => out.push(CheckOutcome::new("prefix_consistency", gap <= 1e-6, format!("max gap {gap:.2e}"))),
        Err(e) => out.push(CheckOutcome::new("prefix_consistency", false, e.to_string())),
    }
    match masking_stats(100_000, 0.15, seed) {
        Ok(s) => {
            let ok = (s.selection_rate - 0.15).abs() <= 0.01
                && (s.mask_share - 0.8).abs() <= 0.02
                && (s.random_share - 0.1).abs() <= 0.02
                && (s.keep_share - 0.1).abs() <= 0.02;
            out.push(CheckOutcome::new(
                "masking",
                ok,
                format!(
                    "{} tokens, selected {:.4}, mask/random/keep {:.4}/{:.4}/{:.4}",
                    s.maskable, s.selection_rate, s.mask_share, s.random_share, s.keep_share
                ),
            ));
        }
        Err(e) => out.push(CheckOutcome::new("masking", false, e.to_string())),
    }
    match icc_stats(10_000, seed) {
        Ok((frac, layout)) => out.push(CheckOutcome::new(
            "icc_labels",
            (frac - 0.5).abs() <= 0.02 && layout,
            format!("cross-repo fraction {frac:.4}, layout {}", if layout { "ok" } else { "broken" }),
        )),
        Err(e) => out.push(CheckOutcome::new("icc_labels", false, e.to_string())),
    }
    match metric_oracle_gap(100, seed) {
        Ok(gap) => out.push(CheckOutcome::new("metric_oracles", gap <= 1e-12, format!("max gap {gap:.2e}"))),
        Err(e) => out.push(CheckOutcome::new("metric_oracles", false, e.to_string())),
    }
    out
}
