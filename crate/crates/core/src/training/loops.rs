use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grad::{clone_loss_grad, pretrain_loss_grad, retrieval_loss_grad, ExitAccuracy, PretrainBatch};
use super::{adamw_step, clip_grad_norm, lr_at, AdamState, BinaryObjective, OptimizerConfig, TrainPlan};
use crate::datagen::{ClonePair, Triplet};
use crate::model::{Checkpoint, Params, Scalar, TokenBatch};
use crate::objectives::{alphas, ExitLossBreakdown, LossLogLine};
use crate::packing::{apply_mlm_mask, pack_icc, pack_nsp, pack_pair_ids, pack_single, PackedExample, RepoPool};
use crate::tokenizer::Vocab;
use crate::{derive_rng, Error, Result};

pub const INSTRUCTION_T2C: &str = "retrieve code for this description:";
pub const INSTRUCTION_C2C: &str = "find equivalent code:";

/// Stream tag separating evaluation draws from training draws.
const EVAL_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub ckpt: Checkpoint<T>,
    pub log: Vec<LossLogLine>,
}

struct Stepper<T> {
    state: AdamState<T>,
    grads: Params<T>,
    log: Vec<LossLogLine>,
}

impl<T: Scalar> Stepper<T> {
    fn new(ckpt: &Checkpoint<T>) -> Self {
        Self { state: AdamState::new(&ckpt.params), grads: ckpt.params.zeros_like(), log: Vec::new() }
    }

    /// Clips, applies the update of local step `s` and logs the loss.
    fn apply(&mut self, ckpt: &mut Checkpoint<T>, s: u64, b: &ExitLossBreakdown, opt: &OptimizerConfig) -> Result<()> {
        if !b.total.is_finite() {
            return Err(Error::NonFinite { step: s, what: format!("loss {:?}", b.losses) });
        }
        clip_grad_norm(&mut self.grads, opt.clip_norm);
        let lr = lr_at(s + 1, opt);
        adamw_step(&mut ckpt.params, &self.grads, &mut self.state, opt, lr)
            .map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { step: s, what },
                e => e,
            })?;
        ckpt.step += 1;
        self.log.push(LossLogLine::new(s, b, lr));
        Ok(())
    }
}

fn check_plan<T: Scalar>(ckpt: &Checkpoint<T>, plan: &TrainPlan, opt: &OptimizerConfig) -> Result<()> {
    plan.validate(&ckpt.config)?;
    opt.validate()
}

/// Packs, masks and labels one pre-training batch.
pub fn sample_pretrain_batch<R: Rng + ?Sized>(
    pool: &RepoPool,
    plan: &TrainPlan,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Vec<PackedExample>> {
    (0..plan.batch_size)
        .map(|_| {
            let ex = match plan.objective {
                BinaryObjective::Icc => pack_icc(pool, plan.max_len, plan.p_cross, rng)?,
                BinaryObjective::Nsp => pack_nsp(pool, plan.max_len, plan.p_cross, rng)?,
            };
            Ok(apply_mlm_mask(&ex, plan.mask_rate, vocab_size, rng))
        })
        .collect()
}

/// MLM + ICC (or NSP) pre-training, deterministic in `plan.seed`.
pub fn pretrain<T: Scalar>(
    init: Checkpoint<T>,
    pool: &RepoPool,
    plan: &TrainPlan,
    opt: &OptimizerConfig,
) -> Result<TrainOutcome<T>> {
    check_plan(&init, plan, opt)?;
    let weights = plan.weights(&init.config);
    let mut ckpt = init;
    let mut st = Stepper::new(&ckpt);
    for s in 0..plan.steps {
        let mut rng = derive_rng(plan.seed, s);
        let exs = sample_pretrain_batch(pool, plan, ckpt.config.vocab_size, &mut rng)?;
        let batch = PretrainBatch::new(&exs)?;
        st.grads.fill_zero();
        let ev = pretrain_loss_grad(&ckpt, &batch, &weights, Some(&mut st.grads))?;
        st.apply(&mut ckpt, s, &ev.breakdown, opt)?;
        if s % 100 == 0 {
            log::debug!("pretrain step {s} loss {:.4}", ev.breakdown.total);
        }
    }
    Ok(TrainOutcome { ckpt, log: st.log })
}

/// Masked-token and ICC accuracy at every exit on `n_batches` fresh packs.
pub fn pretrain_accuracy<T: Scalar>(
    ckpt: &Checkpoint<T>,
    pool: &RepoPool,
    plan: &TrainPlan,
    n_batches: u64,
    seed: u64,
) -> Result<BTreeMap<usize, ExitAccuracy>> {
    let weights = alphas(&ckpt.config.exits, ckpt.config.depth);
    let mut total: BTreeMap<usize, ExitAccuracy> = BTreeMap::new();
    for i in 0..n_batches {
        let mut rng = derive_rng(seed, EVAL_STREAM + i);
        let exs = sample_pretrain_batch(pool, plan, ckpt.config.vocab_size, &mut rng)?;
        let ev = pretrain_loss_grad(ckpt, &PretrainBatch::new(&exs)?, &weights, None)?;
        for (e, a) in ev.accuracy {
            total.entry(e).or_default().add(&a);
        }
    }
    Ok(total)
}

fn fresh_name<R: Rng + ?Sized>(rng: &mut R, len: usize) -> String {
    const HEAD: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
    const TAIL: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    let mut s = String::with_capacity(len);
    s.push(HEAD[rng.random_range(0..HEAD.len())] as char);
    for _ in 1..len {
        s.push(TAIL[rng.random_range(0..TAIL.len())] as char);
    }
    s
}

/// Renames every whitespace-delimited word that occurs more than twice and
/// has at least three characters to one fresh random string, consistently
/// within the snippet. Whitespace is preserved.
pub fn augment_code<R: Rng + ?Sized>(code: &str, rng: &mut R) -> String {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for w in code.split_whitespace() {
        let c = counts.entry(w).or_insert(0);
        if *c == 0 {
            order.push(w);
        }
        *c += 1;
    }
    let mut renames: HashMap<&str, String> = HashMap::new();
    for w in order {
        if counts[w] > 2 && w.chars().count() >= 3 {
            let name = loop {
                let len = rng.random_range(3..=6);
                let cand = fresh_name(rng, len);
                if !code.contains(&cand) && !renames.values().any(|v| *v == cand) {
                    break cand;
                }
            };
            renames.insert(w, name);
        }
    }
    if renames.is_empty() {
        return code.to_string();
    }
    let mut out = String::with_capacity(code.len() + 8);
    let mut start: Option<usize> = None;
    let flush = |out: &mut String, w: &str| out.push_str(renames.get(w).map_or(w, String::as_str));
    for (i, c) in code.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                flush(&mut out, &code[s..i]);
            }
            out.push(c);
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        flush(&mut out, &code[s..]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    T2c,
    C2c,
}

/// One (query, target) pair of a retrieval fine-tuning batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalExample {
    pub kind: PairKind,
    pub triplet: usize,
    pub query: String,
    pub target: String,
    pub augmented: bool,
}

/// Draws `batch_size` distinct triplets; the first half become
/// text-to-code pairs, the rest code-to-code pairs. Code sides are
/// augmented with probability `aug_rate` per example; in code-to-code pairs
/// both sides are augmented independently.
pub fn sample_retrieval_batch<R: Rng + ?Sized>(
    triplets: &[Triplet],
    batch_size: usize,
    aug_rate: f64,
    rng: &mut R,
) -> Result<Vec<RetrievalExample>> {
    if batch_size < 2 {
        return Err(Error::invalid("retrieval batches need at least 2 examples"));
    }
    if triplets.len() < batch_size {
        return Err(Error::invalid(format!("{} triplets cannot fill a batch of {batch_size}", triplets.len())));
    }
    let n_t2c = batch_size / 2;
    let picks = sample(rng, triplets.len(), batch_size).into_vec();
    let mut out = Vec::with_capacity(batch_size);
    for (k, i) in picks.into_iter().enumerate() {
        let t = &triplets[i];
        let augmented = rng.random_bool(aug_rate);
        let code = |text: &str, rng: &mut R| if augmented { augment_code(text, rng) } else { text.to_string() };
        let ex = if k < n_t2c {
            let target = code(&t.code_a.text, rng);
            RetrievalExample { kind: PairKind::T2c, triplet: i, query: format!("{INSTRUCTION_T2C} {}", t.nl), target, augmented }
        } else {
            let q = code(&t.code_a.text, rng);
            let target = code(&t.code_b.text, rng);
            RetrievalExample { kind: PairKind::C2c, triplet: i, query: format!("{INSTRUCTION_C2C} {q}"), target, augmented }
        };
        out.push(ex);
    }
    Ok(out)
}

pub fn encode_retrieval_batch(
    examples: &[RetrievalExample],
    vocab: &Vocab,
    max_len: usize,
) -> Result<(TokenBatch, TokenBatch)> {
    let pack = |s: &str| pack_single(&vocab.encode(s), max_len);
    let q: Vec<PackedExample> = examples.iter().map(|e| pack(&e.query)).collect::<Result<_>>()?;
    let t: Vec<PackedExample> = examples.iter().map(|e| pack(&e.target)).collect::<Result<_>>()?;
    Ok((TokenBatch::from_examples(&q)?.trim_leading_padding(), TokenBatch::from_examples(&t)?.trim_leading_padding()))
}

/// Contrastive fine-tuning on balanced text-to-code / code-to-code batches
/// at a constant learning rate.
pub fn finetune_retrieval<T: Scalar>(
    init: Checkpoint<T>,
    triplets: &[Triplet],
    vocab: &Vocab,
    plan: &TrainPlan,
    opt: &OptimizerConfig,
) -> Result<TrainOutcome<T>> {
    check_plan(&init, plan, opt)?;
    if triplets.is_empty() {
        return Err(Error::invalid("no triplets"));
    }
    if plan.batch_size < 2 {
        return Err(Error::invalid("retrieval batches need at least 2 examples"));
    }
    let weights = plan.weights(&init.config);
    let mut ckpt = init;
    let mut st = Stepper::new(&ckpt);
    for s in 0..plan.steps {
        let mut rng = derive_rng(plan.seed, s);
        let exs = sample_retrieval_batch(triplets, plan.batch_size, plan.augmentation_rate, &mut rng)?;
        let (a, b) = encode_retrieval_batch(&exs, vocab, plan.max_len)?;
        st.grads.fill_zero();
        let bd = retrieval_loss_grad(&ckpt, &a, &b, &weights, plan.temperature, Some(&mut st.grads))?;
        st.apply(&mut ckpt, s, &bd, opt)?;
    }
    Ok(TrainOutcome { ckpt, log: st.log })
}

/// Packs labeled pairs as `[SEP] a [SEP] b [CLS]`; unlabeled pairs are an
/// error.
pub fn pack_clone_pairs(pairs: &[ClonePair], vocab: &Vocab, max_len: usize) -> Result<(Vec<PackedExample>, Vec<bool>)> {
    let mut exs = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for p in pairs {
        let label = p.label.ok_or_else(|| Error::Data(format!("clone pair {} is unlabeled", p.id)))?;
        exs.push(pack_pair_ids(&vocab.encode(&p.a.text), &vocab.encode(&p.b.text), max_len)?);
        labels.push(label);
    }
    Ok((exs, labels))
}

/// Clone-detection fine-tuning of every exit's classifier.
pub fn finetune_clone<T: Scalar>(
    init: Checkpoint<T>,
    pairs: &[ClonePair],
    vocab: &Vocab,
    plan: &TrainPlan,
    opt: &OptimizerConfig,
) -> Result<TrainOutcome<T>> {
    check_plan(&init, plan, opt)?;
    let (exs, labels) = pack_clone_pairs(pairs, vocab, plan.max_len)?;
    if exs.is_empty() {
        return Err(Error::invalid("no clone pairs"));
    }
    let weights = plan.weights(&init.config);
    let n = plan.batch_size.min(exs.len());
    let mut ckpt = init;
    let mut st = Stepper::new(&ckpt);
    for s in 0..plan.steps {
        let mut rng = derive_rng(plan.seed, s);
        let idx = sample(&mut rng, exs.len(), n).into_vec();
        let batch = TokenBatch::from_examples(idx.iter().map(|&i| &exs[i]))?.trim_leading_padding();
        let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        st.grads.fill_zero();
        let (bd, _) = clone_loss_grad(&ckpt, &batch, &y, &weights, Some(&mut st.grads))?;
        st.apply(&mut ckpt, s, &bd, opt)?;
    }
    Ok(TrainOutcome { ckpt, log: st.log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_clone_pairs, gen_corpus, gen_triplets, triplet_snippets};
    use crate::model::EncoderConfig;
    use crate::seeded_rng;
    use crate::tokenizer::build_vocab;
    use crate::training::TrainMode;

    fn langs() -> Vec<String> {
        vec!["toyA".into(), "toyB".into()]
    }

    fn small_cfg(vocab: usize) -> EncoderConfig {
        let mut c = EncoderConfig::desk(vocab);
        c.depth = 4;
        c.exits = vec![2, 4];
        c.hidden = 16;
        c.n_heads = 2;
        c.n_kv_heads = 1;
        c.intermediate = 32;
        c.max_seq = 32;
        c.proj_dim = 8;
        c
    }

    #[test]
    fn augmentation_rules() {
        let mut rng = seeded_rng(1);
        assert_eq!(augment_code("a b a", &mut rng), "a b a");
        assert_eq!(augment_code("foo foo bar", &mut rng), "foo foo bar");
        let out = augment_code("foo foo foo", &mut rng);
        let words: Vec<&str> = out.split(' ').collect();
        assert_eq!(words.len(), 3);
        assert!(words.iter().all(|w| *w == words[0]));
        assert!(!"foo foo foo".contains(words[0]));
        let code = "x = 1\nfoo  = foo + foo\nab ab ab";
        let out = augment_code(code, &mut rng);
        assert_eq!(out.split_whitespace().filter(|w| *w == "ab").count(), 3);
        assert_eq!(out.len() - out.replace(char::is_whitespace, "").len(), code.len() - code.replace(char::is_whitespace, "").len());
    }

    #[test]
    fn retrieval_batches_are_balanced_and_distinct() {
        let tr = gen_triplets(1, 40, &langs()).unwrap();
        let mut rng = seeded_rng(2);
        let b = sample_retrieval_batch(&tr, 10, 0.3, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|e| e.kind == PairKind::T2c).count(), 5);
        let mut ids: Vec<usize> = b.iter().map(|e| e.triplet).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        for e in &b {
            match e.kind {
                PairKind::T2c => {
                    assert!(e.query.starts_with(INSTRUCTION_T2C));
                    assert!(e.query.ends_with(&tr[e.triplet].nl));
                }
                PairKind::C2c => assert!(e.query.starts_with(INSTRUCTION_C2C)),
            }
            if !e.augmented {
                let want = if e.kind == PairKind::T2c { &tr[e.triplet].code_a.text } else { &tr[e.triplet].code_b.text };
                assert_eq!(&e.target, want);
            }
        }
        assert!(sample_retrieval_batch(&tr, 1, 0.3, &mut rng).is_err());
    }

    #[test]
    fn zero_steps_return_init() {
        let corpus = gen_corpus(1, 2, 4, &langs()).unwrap();
        let vocab = build_vocab(&corpus, 200).unwrap();
        let init = Checkpoint::<f64>::init(small_cfg(vocab.len()), 1).unwrap();
        let mut plan = TrainPlan::desk(TrainMode::Pretrain);
        plan.steps = 0;
        plan.max_len = 32;
        let out = pretrain(init.clone(), &RepoPool::new(&corpus, &vocab), &plan, &OptimizerConfig::desk_pretrain(10)).unwrap();
        assert_eq!(out.ckpt, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic_and_learns() {
        let corpus = gen_corpus(3, 2, 4, &langs()).unwrap();
        let vocab = build_vocab(&corpus, 200).unwrap();
        let pool = RepoPool::new(&corpus, &vocab);
        let init = Checkpoint::<f64>::init(small_cfg(vocab.len()), 2).unwrap();
        let mut plan = TrainPlan::desk(TrainMode::Pretrain);
        plan.steps = 30;
        plan.batch_size = 4;
        plan.max_len = 32;
        let opt = OptimizerConfig::desk_pretrain(30);
        let a = pretrain(init.clone(), &pool, &plan, &opt).unwrap();
        let b = pretrain(init, &pool, &plan, &opt).unwrap();
        assert_eq!(a.ckpt, b.ckpt);
        assert_eq!(a.log, b.log);
        assert_eq!(a.ckpt.step, 30);
        let head: f64 = a.log[..5].iter().map(|l| l.total).sum();
        let tail: f64 = a.log[25..].iter().map(|l| l.total).sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn single_exit_matches_zeroed_alphas() {
        let corpus = gen_corpus(4, 2, 4, &langs()).unwrap();
        let vocab = build_vocab(&corpus, 200).unwrap();
        let pool = RepoPool::new(&corpus, &vocab);
        let cfg = small_cfg(vocab.len());
        let init = Checkpoint::<f64>::init(cfg.clone(), 3).unwrap();
        let mut plan = TrainPlan::desk(TrainMode::Pretrain);
        plan.batch_size = 3;
        plan.max_len = 32;
        plan.single_exit = Some(4);
        let mut rng = derive_rng(9, 0);
        let exs = sample_pretrain_batch(&pool, &plan, cfg.vocab_size, &mut rng).unwrap();
        let batch = PretrainBatch::new(&exs).unwrap();
        let mut zeroed = alphas(&cfg.exits, cfg.depth);
        zeroed.insert(2, 0.0);
        let mut g1 = init.params.zeros_like();
        let mut g2 = init.params.zeros_like();
        let a = pretrain_loss_grad(&init, &batch, &plan.weights(&cfg), Some(&mut g1)).unwrap();
        let b = pretrain_loss_grad(&init, &batch, &zeroed, Some(&mut g2)).unwrap();
        assert_eq!(a.breakdown.total, b.breakdown.total);
        assert_eq!(g1, g2);
    }

    #[test]
    fn retrieval_and_clone_finetuning_run() {
        let tr = gen_triplets(5, 12, &langs()).unwrap();
        let mut texts = triplet_snippets(&tr);
        texts.push(crate::Snippet { id: "i".into(), repo_id: "i".into(), lang: "nl".into(), text: format!("{INSTRUCTION_T2C} {INSTRUCTION_C2C}") });
        let vocab = build_vocab(&texts, 300).unwrap();
        let init = Checkpoint::<f32>::init(small_cfg(vocab.len()), 4).unwrap();
        let mut plan = TrainPlan::desk(TrainMode::FinetuneRetrieval);
        plan.steps = 3;
        plan.batch_size = 4;
        plan.max_len = 32;
        let out = finetune_retrieval(init.clone(), &tr, &vocab, &plan, &OptimizerConfig::desk_finetune()).unwrap();
        assert_eq!(out.log.len(), 3);
        plan.batch_size = 1;
        assert!(finetune_retrieval(init.clone(), &tr, &vocab, &plan, &OptimizerConfig::desk_finetune()).is_err());

        let mut pairs = gen_clone_pairs(6, 6, &langs()).unwrap();
        plan.mode = TrainMode::FinetuneClone;
        plan.batch_size = 4;
        let out = finetune_clone(init.clone(), &pairs, &vocab, &plan, &OptimizerConfig::desk_finetune()).unwrap();
        assert!(out.log.iter().all(|l| l.total.is_finite()));
        pairs[2].label = None;
        assert!(matches!(
            finetune_clone(init, &pairs, &vocab, &plan, &OptimizerConfig::desk_finetune()),
            Err(Error::Data(_))
        ));
    }
}
