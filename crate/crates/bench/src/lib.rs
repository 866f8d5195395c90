//! Fixtures shared by the benchmarks.

use mosekit_core::datagen::gen_corpus;
use mosekit_core::evalkit::unit_vectors;
use mosekit_core::packing::{apply_mlm_mask, pack_icc, RepoPool};
use mosekit_core::tokenizer::build_vocab;
use mosekit_core::training::PretrainBatch;
use mosekit_core::{seeded_rng, Checkpoint, EncoderConfig, RankedList, Snippet};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn langs() -> Vec<String> {
    vec!["toyA".into(), "toyB".into(), "toyC".into()]
}

pub fn corpus(repos: usize) -> Vec<Snippet> {
    gen_corpus(1, repos, 16, &langs()).expect("corpus")
}

/// Desk-sized model with a masked ICC batch drawn from a small corpus.
pub fn desk_batch(batch: usize, max_len: usize) -> (Checkpoint<f32>, PretrainBatch) {
    let corpus = corpus(8);
    let vocab = build_vocab(&corpus, 4096).expect("vocab");
    let pool = RepoPool::new(&corpus, &vocab);
    let mut rng = seeded_rng(2);
    let exs: Vec<_> = (0..batch)
        .map(|_| apply_mlm_mask(&pack_icc(&pool, max_len, 0.5, &mut rng).expect("pack"), 0.15, vocab.len(), &mut rng))
        .collect();
    let ckpt = Checkpoint::init(EncoderConfig::desk(vocab.len()), 3).expect("init");
    (ckpt, PretrainBatch::new(&exs).expect("batch"))
}

pub fn ranked_lists(n: usize, len: usize) -> Vec<RankedList> {
    let mut rng = seeded_rng(4);
    (0..n)
        .map(|q| {
            let mut c: Vec<String> = (0..len).map(|i| format!("c{i}")).collect();
            c.shuffle(&mut rng);
            let rel = c[..3].iter().cloned().collect();
            c.shuffle(&mut rng);
            RankedList::new(format!("q{q}"), c, rel).expect("list")
        })
        .collect()
}

pub fn embeddings(n: usize, dim: usize) -> Vec<(String, Array1<f64>)> {
    let mut rng = seeded_rng(5);
    let raw: Vec<_> =
        (0..n).map(|i| (format!("v{i}"), Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0)))).collect();
    unit_vectors(&raw).expect("non-zero vectors")
}
