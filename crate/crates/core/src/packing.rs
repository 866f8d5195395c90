//! Model inputs: left-padded sequences of `[SEP]`-separated segments with a
//! trailing `[CLS]`, plus MLM corruption.
//!
//! Layout of every packed example:
//!
//! ```text
//! [PAD] … [PAD] [SEP] s1 … [SEP] s2 … [CLS]
//! ```

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Snippet;
use crate::tokenizer::{self, Vocab, CLS, MASK, N_SPECIAL, PAD, SEP};
use crate::{Error, Result};

pub const DEFAULT_MASK_RATE: f64 = 0.15;
pub const DEFAULT_P_CROSS: f64 = 0.5;
pub const MIN_PACK_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IccLabel {
    SameRepo,
    CrossRepo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NspLabel {
    Next,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedExample {
    pub ids: Vec<u32>,
    pub valid_mask: Vec<bool>,
    /// `(position, original id)` for every MLM-selected position.
    pub mlm_targets: Vec<(usize, u32)>,
    pub icc_label: Option<IccLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nsp_label: Option<NspLabel>,
    pub cls_pos: usize,
    /// Half-open token ranges of each segment, separators excluded.
    pub seg_bounds: Vec<(usize, usize)>,
}

impl PackedExample {
    /// Target for the shared binary head: 1 for same-repo / next, 0 otherwise.
    pub fn binary_target(&self) -> Option<f64> {
        match (self.icc_label, self.nsp_label) {
            (Some(IccLabel::SameRepo), _) | (_, Some(NspLabel::Next)) => Some(1.0),
            (Some(IccLabel::CrossRepo), _) | (_, Some(NspLabel::Random)) => Some(0.0),
            _ => None,
        }
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// Positions eligible for MLM corruption.
    pub fn maskable(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.ids.len()).filter(|&i| self.valid_mask[i] && !tokenizer::is_special(self.ids[i]))
    }
}

/// Lays out segments that are known to fit.
fn layout(segments: &[&[u32]], max_len: usize) -> PackedExample {
    let used: usize = segments.iter().map(|s| s.len() + 1).sum::<usize>() + 1;
    debug_assert!(used <= max_len);
    let pad = max_len - used;
    let mut ids = vec![PAD; pad];
    let mut seg_bounds = Vec::with_capacity(segments.len());
    for s in segments {
        ids.push(SEP);
        let start = ids.len();
        ids.extend_from_slice(s);
        seg_bounds.push((start, ids.len()));
    }
    ids.push(CLS);
    let mut valid_mask = vec![false; pad];
    valid_mask.resize(max_len, true);
    PackedExample {
        ids,
        valid_mask,
        mlm_targets: Vec::new(),
        icc_label: None,
        nsp_label: None,
        cls_pos: max_len - 1,
        seg_bounds,
    }
}

/// Shortens two segments to `budget` total tokens by removing tail tokens
/// from whichever is currently longer (`a` on ties), so equal-length inputs
/// lose tokens alternately. Neither drops below one token.
fn truncate_pair<'a>(mut a: &'a [u32], mut b: &'a [u32], budget: usize) -> (&'a [u32], &'a [u32]) {
    while a.len() + b.len() > budget {
        if a.len() >= b.len() && a.len() > 1 {
            a = &a[..a.len() - 1];
        } else if b.len() > 1 {
            b = &b[..b.len() - 1];
        } else {
            break;
        }
    }
    (a, b)
}

/// `[PAD]… [SEP] a [SEP] b [CLS]`.
pub fn pack_pair_ids(a: &[u32], b: &[u32], max_len: usize) -> Result<PackedExample> {
    if max_len < MIN_PACK_LEN {
        return Err(Error::invalid(format!("max_len {max_len} < {MIN_PACK_LEN}")));
    }
    let (a, b) = truncate_pair(a, b, max_len - 3);
    Ok(layout(&[a, b], max_len))
}

pub fn pack_pair(a: &Snippet, b: &Snippet, vocab: &Vocab, max_len: usize) -> Result<PackedExample> {
    pack_pair_ids(&vocab.encode(&a.text), &vocab.encode(&b.text), max_len)
}

/// `[PAD]… [SEP] s [CLS]`, tail-truncated; used for embedding single texts.
pub fn pack_single(ids: &[u32], max_len: usize) -> Result<PackedExample> {
    if max_len < MIN_PACK_LEN {
        return Err(Error::invalid(format!("max_len {max_len} < {MIN_PACK_LEN}")));
    }
    let s = &ids[..ids.len().min(max_len - 2)];
    Ok(layout(&[s], max_len))
}

/// Encoded snippets grouped by repository, in generation order.
#[derive(Debug, Clone)]
pub struct RepoPool {
    repos: Vec<(String, Vec<Vec<u32>>)>,
}

impl RepoPool {
    pub fn new(corpus: &[Snippet], vocab: &Vocab) -> Self {
        let mut by_repo: BTreeMap<&str, Vec<Vec<u32>>> = BTreeMap::new();
        for s in corpus {
            by_repo.entry(&s.repo_id).or_default().push(vocab.encode(&s.text));
        }
        Self { repos: by_repo.into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }

    pub fn n_repos(&self) -> usize {
        self.repos.len()
    }

    pub fn n_snippets(&self) -> usize {
        self.repos.iter().map(|r| r.1.len()).sum()
    }

    pub fn repos(&self) -> &[(String, Vec<Vec<u32>>)] {
        &self.repos
    }
}

/// Concatenates two or more snippets. With probability `p_cross` exactly one
/// segment comes from a different repository.
pub fn pack_icc<R: Rng + ?Sized>(
    pool: &RepoPool,
    max_len: usize,
    p_cross: f64,
    rng: &mut R,
) -> Result<PackedExample> {
    if max_len < MIN_PACK_LEN {
        return Err(Error::invalid(format!("max_len {max_len} < {MIN_PACK_LEN}")));
    }
    if pool.n_snippets() == 0 {
        return Err(Error::invalid("empty snippet pool"));
    }
    if !(0.0..=1.0).contains(&p_cross) {
        return Err(Error::invalid(format!("p_cross {p_cross} outside [0, 1]")));
    }
    let cross = rng.random_bool(p_cross);
    if cross && pool.n_repos() < 2 {
        return Err(Error::invalid("cross-repo packing needs at least two repositories"));
    }
    let nonempty: Vec<usize> = (0..pool.n_repos()).filter(|&r| !pool.repos[r].1.is_empty()).collect();
    let home = *nonempty.choose(rng).unwrap();
    let home_snips = &pool.repos[home].1;
    let mut order: Vec<usize> = (0..home_snips.len()).collect();
    order.shuffle(rng);
    let mut home_iter = order.into_iter();

    let cap = max_len - 3;
    let first = &home_snips[home_iter.next().unwrap()][..];
    let second: &[u32] = if cross {
        let others: Vec<usize> = nonempty.iter().copied().filter(|&r| r != home).collect();
        let foreign = *others.choose(rng).unwrap();
        pool.repos[foreign].1.choose(rng).unwrap()
    } else {
        match home_iter.next() {
            Some(i) => &home_snips[i],
            None => &home_snips[0],
        }
    };
    let first = &first[..first.len().min(cap)];
    let second = &second[..second.len().min(cap)];
    let (first, second) = truncate_pair(first, second, cap);
    let mut segments: Vec<&[u32]> = vec![first, second];
    let mut used = first.len() + second.len() + 3;
    for i in home_iter {
        let s = &home_snips[i];
        if used + s.len() + 1 > max_len {
            break;
        }
        used += s.len() + 1;
        segments.push(s);
    }
    segments.shuffle(rng);
    let mut ex = layout(&segments, max_len);
    ex.icc_label = Some(if cross { IccLabel::CrossRepo } else { IccLabel::SameRepo });
    Ok(ex)
}

/// Pairs a snippet with its successor in the same repository ("next") or,
/// with probability `p_random`, with any other snippet ("random").
pub fn pack_nsp<R: Rng + ?Sized>(
    pool: &RepoPool,
    max_len: usize,
    p_random: f64,
    rng: &mut R,
) -> Result<PackedExample> {
    let anchors: Vec<(usize, usize)> = pool
        .repos
        .iter()
        .enumerate()
        .flat_map(|(r, (_, snips))| (0..snips.len().saturating_sub(1)).map(move |i| (r, i)))
        .collect();
    if anchors.is_empty() {
        return Err(Error::invalid("no repository holds two consecutive snippets"));
    }
    let all: Vec<(usize, usize)> = pool
        .repos
        .iter()
        .enumerate()
        .flat_map(|(r, (_, snips))| (0..snips.len()).map(move |i| (r, i)))
        .collect();
    let (r, i) = *anchors.choose(rng).unwrap();
    let random = rng.random_bool(p_random);
    let (rb, ib) = if random {
        loop {
            let c = *all.choose(rng).unwrap();
            if c != (r, i + 1) && c != (r, i) || all.len() <= 2 {
                break c;
            }
        }
    } else {
        (r, i + 1)
    };
    let mut ex = pack_pair_ids(&pool.repos[r].1[i], &pool.repos[rb].1[ib], max_len)?;
    ex.nsp_label = Some(if random { NspLabel::Random } else { NspLabel::Next });
    Ok(ex)
}

/// BERT-style corruption: each maskable position is selected with
/// probability `rate`; selected positions become `[MASK]` (80%), a random
/// non-special id (10%) or stay unchanged (10%).
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    ex: &PackedExample,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> PackedExample {
    let mut out = ex.clone();
    out.mlm_targets.clear();
    let positions: Vec<usize> = ex.maskable().collect();
    for pos in positions {
        if !rng.random_bool(rate) {
            continue;
        }
        let original = ex.ids[pos];
        let r: f64 = rng.random();
        if r < 0.8 {
            out.ids[pos] = MASK;
        } else if r < 0.9 && vocab_size > N_SPECIAL as usize {
            out.ids[pos] = rng.random_range(N_SPECIAL..vocab_size as u32);
        }
        out.mlm_targets.push((pos, original));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_corpus;
    use crate::seeded_rng;
    use crate::tokenizer::build_vocab;

    fn fixture() -> (Vec<Snippet>, Vocab) {
        let langs: Vec<String> = ["toyA", "toyB"].iter().map(|s| s.to_string()).collect();
        let c = gen_corpus(3, 4, 6, &langs).unwrap();
        let v = build_vocab(&c, 1000).unwrap();
        (c, v)
    }

    fn check_layout(ex: &PackedExample, max_len: usize) {
        assert_eq!(ex.ids.len(), max_len);
        assert_eq!(ex.valid_mask.len(), max_len);
        assert_eq!(ex.cls_pos, max_len - 1);
        assert_eq!(ex.ids[ex.cls_pos], CLS);
        let first_valid = ex.valid_mask.iter().position(|&v| v).unwrap();
        assert!(ex.valid_mask[first_valid..].iter().all(|&v| v));
        assert!(ex.ids[..first_valid].iter().all(|&i| i == PAD));
        assert_eq!(ex.ids[first_valid], SEP);
        for w in ex.seg_bounds.windows(2) {
            assert_eq!(w[0].1 + 1, w[1].0);
            assert_eq!(ex.ids[w[0].1], SEP);
        }
        assert!(ex.seg_bounds.iter().all(|(s, e)| e > s));
        let seps = ex.ids.iter().filter(|&&i| i == SEP).count();
        assert_eq!(seps, ex.seg_bounds.len());
    }

    #[test]
    fn icc_layout_and_degenerate_probability() {
        let (c, v) = fixture();
        let pool = RepoPool::new(&c, &v);
        let mut rng = seeded_rng(1);
        for _ in 0..200 {
            let ex = pack_icc(&pool, 64, 0.0, &mut rng).unwrap();
            check_layout(&ex, 64);
            assert!(ex.seg_bounds.len() >= 2);
            assert_eq!(ex.icc_label, Some(IccLabel::SameRepo));
        }
    }

    #[test]
    fn icc_truncates_long_snippets() {
        let (c, v) = fixture();
        let pool = RepoPool::new(&c, &v);
        let mut rng = seeded_rng(2);
        for _ in 0..50 {
            let ex = pack_icc(&pool, 12, 0.5, &mut rng).unwrap();
            check_layout(&ex, 12);
            assert_eq!(ex.seg_bounds.len(), 2);
        }
        assert!(pack_icc(&pool, 7, 0.5, &mut rng).is_err());
    }

    #[test]
    fn pair_layout() {
        let ex = pack_pair_ids(&[10, 11], &[12], 16).unwrap();
        check_layout(&ex, 16);
        assert_eq!(&ex.ids[10..], &[SEP, 10, 11, SEP, 12, CLS]);
        assert!(ex.icc_label.is_none());

        let same = pack_pair_ids(&[7, 8, 9], &[7, 8, 9], 16).unwrap();
        let lens: Vec<usize> = same.seg_bounds.iter().map(|(s, e)| e - s).collect();
        assert_eq!(lens[0], lens[1]);

        let long: Vec<u32> = (5..105).collect();
        let ex = pack_pair_ids(&long, &long[..30], 32).unwrap();
        check_layout(&ex, 32);
        assert!(ex.valid_mask.iter().all(|&v| v));
        let lens: Vec<usize> = ex.seg_bounds.iter().map(|(s, e)| e - s).collect();
        assert_eq!(lens.iter().sum::<usize>(), 29);
        assert!(lens.iter().all(|&l| l > 0));
    }

    #[test]
    fn nsp_degenerate_probabilities() {
        let (c, v) = fixture();
        let pool = RepoPool::new(&c, &v);
        let mut rng = seeded_rng(4);
        for _ in 0..100 {
            let ex = pack_nsp(&pool, 64, 0.0, &mut rng).unwrap();
            assert_eq!(ex.nsp_label, Some(NspLabel::Next));
            check_layout(&ex, 64);
            let ex = pack_nsp(&pool, 64, 1.0, &mut rng).unwrap();
            assert_eq!(ex.nsp_label, Some(NspLabel::Random));
        }
    }

    #[test]
    fn nsp_split_is_balanced() {
        let (c, v) = fixture();
        let pool = RepoPool::new(&c, &v);
        let mut rng = seeded_rng(5);
        let n = 10_000;
        let random = (0..n)
            .filter(|_| pack_nsp(&pool, 48, 0.5, &mut rng).unwrap().nsp_label == Some(NspLabel::Random))
            .count();
        let frac = random as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "random fraction {frac}");
    }

    #[test]
    fn mask_rate_extremes() {
        let (c, v) = fixture();
        let pool = RepoPool::new(&c, &v);
        let mut rng = seeded_rng(6);
        let ex = pack_icc(&pool, 64, 0.5, &mut rng).unwrap();
        assert!(apply_mlm_mask(&ex, 0.0, v.len(), &mut rng).mlm_targets.is_empty());
        let all = apply_mlm_mask(&ex, 1.0, v.len(), &mut rng);
        let maskable: Vec<usize> = ex.maskable().collect();
        assert_eq!(all.mlm_targets.iter().map(|t| t.0).collect::<Vec<_>>(), maskable);
        for &(pos, orig) in &all.mlm_targets {
            assert_eq!(orig, ex.ids[pos]);
            assert!(!tokenizer::is_special(orig));
        }
        // structure survives corruption
        assert_eq!(all.ids[all.cls_pos], CLS);
        assert_eq!(all.valid_mask, ex.valid_mask);
    }

    #[test]
    fn icc_packs_are_denser_than_single_snippets() {
        let (c, v) = fixture();
        let pool = RepoPool::new(&c, &v);
        let mut rng = seeded_rng(7);
        let max_len = 96;
        let n = 500;
        let icc: f64 = (0..n)
            .map(|_| pack_icc(&pool, max_len, 0.5, &mut rng).unwrap().n_valid() as f64)
            .sum::<f64>()
            / n as f64;
        let single: f64 = c
            .iter()
            .map(|s| pack_single(&v.encode(&s.text), max_len).unwrap().n_valid() as f64)
            .sum::<f64>()
            / c.len() as f64;
        assert!(icc > single, "icc {icc} vs single {single}");
    }

    proptest::proptest! {
        #[test]
        fn packed_layout_invariants(seed in 0u64..500, max_len in 8usize..80, p in 0.0f64..1.0) {
            let (c, v) = fixture();
            let pool = RepoPool::new(&c, &v);
            let mut rng = seeded_rng(seed);
            let ex = pack_icc(&pool, max_len, p, &mut rng).unwrap();
            check_layout(&ex, max_len);
            let m = apply_mlm_mask(&ex, 0.3, v.len(), &mut rng);
            for &(pos, orig) in &m.mlm_targets {
                proptest::prop_assert!(m.valid_mask[pos]);
                proptest::prop_assert!(!tokenizer::is_special(orig));
            }
        }
    }
}
