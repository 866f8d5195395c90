use std::collections::{BTreeMap, BTreeSet};

use mosekit_core::datagen::gen_triplets;
use mosekit_core::evalkit::*;
use mosekit_core::model::{forward, project, Checkpoint, EncoderConfig};
use mosekit_core::packing::pack_single;
use mosekit_core::tokenizer::Vocab;
use mosekit_core::RankedList;
use rand::seq::SliceRandom;
use rand::Rng;

// Reference metrics written against plain position scans.
fn position_of(l: &RankedList, id: &str) -> usize {
    l.candidates.iter().position(|c| c == id).unwrap() + 1
}

fn ref_mrr(ls: &[RankedList]) -> f64 {
    let mut total = 0.0;
    for l in ls {
        let best = l.relevant.iter().map(|r| position_of(l, r)).min().unwrap();
        total += 1.0 / best as f64;
    }
    total / ls.len() as f64
}

fn ref_ndcg(ls: &[RankedList]) -> f64 {
    let mut total = 0.0;
    for l in ls {
        let best = l.relevant.iter().map(|r| position_of(l, r)).min().unwrap();
        total += std::f64::consts::LN_2 / ((best + 1) as f64).ln();
    }
    total / ls.len() as f64
}

fn ref_map(ls: &[RankedList]) -> f64 {
    let mut total = 0.0;
    for l in ls {
        let mut pos: Vec<usize> = l.relevant.iter().map(|r| position_of(l, r)).collect();
        pos.sort();
        let mut ap = 0.0;
        for (i, p) in pos.iter().enumerate() {
            let hits_so_far = l.candidates[..*p].iter().filter(|c| l.relevant.contains(*c)).count();
            assert_eq!(hits_so_far, i + 1);
            ap += hits_so_far as f64 / *p as f64;
        }
        total += ap / pos.len() as f64;
    }
    total / ls.len() as f64
}

fn ref_recall(ls: &[RankedList], k: usize) -> f64 {
    let mut total = 0.0;
    for l in ls {
        let top: BTreeSet<&String> = l.candidates.iter().take(k).collect();
        total += l.relevant.iter().filter(|r| top.contains(r)).count() as f64 / l.relevant.len() as f64;
    }
    total / ls.len() as f64
}

fn random_lists(seed: u64, n: usize, max_rel: usize) -> Vec<RankedList> {
    let mut rng = mosekit_core::seeded_rng(seed);
    (0..n)
        .map(|q| {
            let len = rng.random_range(1..80);
            let mut c: Vec<String> = (0..len).map(|i| format!("x{i}")).collect();
            c.shuffle(&mut rng);
            let k = rng.random_range(1..=max_rel.min(len));
            let rel = c[..k].iter().cloned().collect();
            c.shuffle(&mut rng);
            RankedList::new(format!("q{q}"), c, rel).unwrap()
        })
        .collect()
}

#[test]
fn metrics_match_references_on_random_lists() {
    for seed in 0..3 {
        let single = random_lists(seed, 100, 1);
        let multi = random_lists(seed + 100, 100, 5);
        assert!((mrr(&single) - ref_mrr(&single)).abs() <= 1e-12);
        assert!((ndcg_binary(&single) - ref_ndcg(&single)).abs() <= 1e-12);
        assert!((map_multi(&multi) - ref_map(&multi)).abs() <= 1e-12);
        for k in [1, 5, 10] {
            assert!((recall_at_k(&multi, k) - ref_recall(&multi, k)).abs() <= 1e-12);
        }
        for l in &single {
            assert_eq!(mrr(std::slice::from_ref(l)), map_multi(std::slice::from_ref(l)));
        }
    }
}

#[test]
fn search_equals_full_scan() {
    let mut rng = mosekit_core::seeded_rng(21);
    let raw: Vec<(String, ndarray::Array1<f64>)> = (0..1000)
        .map(|i| (format!("id{i}"), ndarray::Array1::from_shape_fn(16, |_| rng.random_range(-1.0..1.0))))
        .collect();
    let vecs = unit_vectors(&raw).unwrap();
    let index = build_index(&vecs).unwrap();
    for q in 0..20 {
        let query = &vecs[q * 37].1;
        let mut scan: Vec<(String, f64)> = vecs.iter().map(|(id, v)| (id.clone(), v.dot(query))).collect();
        scan.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got = search(&index, query.view(), 1000).unwrap();
        assert_eq!(got, scan);
    }
    assert_eq!(search(&index, vecs[0].1.view(), 5000).unwrap().len(), 1000);
}

#[test]
fn retrieval_eval_equals_composed_oracle() {
    let langs = vec!["toyA".to_string(), "toyC".to_string()];
    let triplets = gen_triplets(4, 12, &langs).unwrap();
    let texts: Vec<String> = triplets
        .iter()
        .flat_map(|t| [t.nl.clone(), t.code_a.text.clone()])
        .chain([mosekit_core::training::INSTRUCTION_T2C.to_string()])
        .collect();
    let vocab = Vocab::build(texts.iter().map(|s| s.as_str()), 1000).unwrap();
    let mut cfg = EncoderConfig::tiny(vocab.len());
    cfg.depth = 3;
    cfg.exits = vec![1, 3];
    cfg.max_seq = 64;
    let ckpt = Checkpoint::<f64>::init(cfg, 8).unwrap();
    let (queries, pool) = t2c_task(&triplets);
    let opts = EvalOptions { exits: vec![1, 3], n_distractors: 5, seed: 11, max_len: 64, task: "t2c".into() };
    let reports = retrieval_eval(&ckpt, &vocab, &queries, &pool, &opts).unwrap();

    // embed each text on its own, then rank the same candidate sets by brute force
    let embed = |text: &str, exit: usize| {
        let ex = pack_single(&vocab.encode(text), 64).unwrap();
        let st = forward(&ckpt, &ex.ids, &ex.valid_mask, exit).unwrap();
        project(&ckpt, st.get(exit).unwrap().pooled.row(0), exit).unwrap()
    };
    let cands = sample_candidates(&queries, &pool, 5, 11).unwrap();
    for r in &reports {
        let mut lists = Vec::new();
        for (q, c) in queries.iter().zip(&cands) {
            let qv = embed(&q.text, r.exit);
            let mut scored: Vec<(String, f64)> = c.iter().map(|&i| (pool[i].id.clone(), embed(&pool[i].text, r.exit).dot(&qv))).collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let ids = scored.into_iter().map(|s| s.0).collect();
            lists.push(RankedList::new(q.id.clone(), ids, BTreeSet::from([q.target.clone()])).unwrap());
        }
        let expect: BTreeMap<&str, f64> = BTreeMap::from([
            ("mrr", ref_mrr(&lists)),
            ("ndcg", ref_ndcg(&lists)),
            ("map", ref_map(&lists)),
            ("recall_at_1", ref_recall(&lists, 1)),
            ("recall_at_5", ref_recall(&lists, 5)),
        ]);
        for (k, v) in expect {
            assert!((r.metrics[k] - v).abs() <= 1e-9, "exit {} {k}: {} vs {v}", r.exit, r.metrics[k]);
            assert!((0.0..=1.0).contains(&r.metrics[k]));
        }
    }
    assert!(reports[0].gflops < reports[1].gflops);

    let short = EvalOptions { n_distractors: 12, ..opts };
    assert!(retrieval_eval(&ckpt, &vocab, &queries, &pool, &short).is_err());
}

#[test]
fn desk_flops_ratio_matches_hand_formula() {
    let cfg = EncoderConfig::desk(300);
    let seq = 128.0;
    // per layer: q, k, v, o projections, two attention products, two MLP matmuls
    let (d, kv, f) = (64.0, 32.0, 256.0);
    let layer = 2.0 * seq * d * d + 2.0 * 2.0 * seq * d * kv + 2.0 * seq * seq * d * 2.0 + 2.0 * seq * d * d + 2.0 * seq * d * f * 2.0;
    let head = 2.0 * d * 32.0;
    let flops = flops_per_exit(&cfg, 128);
    for (&e, &g) in &flops {
        assert!((g * 1e9 - (e as f64 * layer + head)).abs() <= 1e-6 * g * 1e9);
    }
    let ratio = flops[&1] / flops[&8];
    assert!((ratio - 0.125).abs() < 0.001, "{ratio}");
}

#[test]
fn permutation_minimum_p_is_analytic() {
    let a = vec![2.0; 12];
    let b = vec![-1.0; 15];
    let r = permutation_test(&a, &b, 10_000, 0.05, 3).unwrap();
    assert_eq!(r.p_value, 1.0 / 10_001.0);
    assert!(r.reject);
}
