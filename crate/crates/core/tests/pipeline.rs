use mosekit_core::datagen::{gen_clone_pairs, gen_corpus, gen_triplets, plant_near_duplicates};
use mosekit_core::dedup::{lsh_dedup, DedupParams};
use mosekit_core::evalkit::{clone_eval, retrieval_eval, t2c_task, EvalOptions};
use mosekit_core::packing::RepoPool;
use mosekit_core::tokenizer::Vocab;
use mosekit_core::training::{finetune_clone, finetune_retrieval, pretrain, TrainMode, INSTRUCTION_C2C, INSTRUCTION_T2C};
use mosekit_core::{Checkpoint, EncoderConfig, OptimizerConfig, TrainPlan};

fn langs() -> Vec<String> {
    vec!["toyA".into(), "toyD".into()]
}

fn plan(mode: TrainMode) -> TrainPlan {
    TrainPlan { steps: 6, batch_size: 4, max_len: 48, seed: 5, ..TrainPlan::desk(mode) }
}

fn small_config(vocab: usize) -> EncoderConfig {
    EncoderConfig { depth: 3, exits: vec![1, 3], max_seq: 48, ..EncoderConfig::tiny(vocab) }
}

#[test]
fn end_to_end_is_deterministic_and_round_trips() {
    let corpus = gen_corpus(2, 3, 6, &langs()).unwrap();
    let (planted, map) = plant_near_duplicates(&corpus, 0.2, 3).unwrap();
    let clean = lsh_dedup(&planted, &DedupParams::default()).unwrap();
    assert!(clean.kept.len() >= corpus.len() - map.len() && clean.kept.len() < planted.len());

    let triplets = gen_triplets(4, 12, &langs()).unwrap();
    let pairs = gen_clone_pairs(6, 12, &langs()).unwrap();
    let mut texts: Vec<&str> = clean.kept.iter().map(|s| s.text.as_str()).collect();
    texts.extend(triplets.iter().flat_map(|t| [t.nl.as_str(), t.code_a.text.as_str(), t.code_b.text.as_str()]));
    texts.extend(pairs.iter().flat_map(|p| [p.a.text.as_str(), p.b.text.as_str()]));
    texts.extend([INSTRUCTION_T2C, INSTRUCTION_C2C]);
    let vocab = Vocab::build(texts, 2048).unwrap();
    let pool = RepoPool::new(&clean.kept, &vocab);

    let run = || {
        let init = Checkpoint::<f64>::init(small_config(vocab.len()), 1).unwrap();
        let pre = pretrain(init, &pool, &plan(TrainMode::Pretrain), &OptimizerConfig::desk_pretrain(6)).unwrap();
        let ret = finetune_retrieval(pre.ckpt, &triplets, &vocab, &plan(TrainMode::FinetuneRetrieval), &OptimizerConfig::desk_finetune())
            .unwrap();
        finetune_clone(ret.ckpt, &pairs, &vocab, &plan(TrainMode::FinetuneClone), &OptimizerConfig::desk_finetune()).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.ckpt.params, b.ckpt.params);
    assert_eq!(a.log, b.log);
    assert_eq!(a.ckpt.step, 18);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    a.ckpt.save(&path).unwrap();
    let loaded = Checkpoint::<f64>::load(&path).unwrap();
    assert_eq!(loaded.params, a.ckpt.params);
    assert_eq!(loaded.config, a.ckpt.config);

    let (q, p) = t2c_task(&triplets);
    let opts = EvalOptions { exits: vec![1, 3], n_distractors: 5, seed: 0, max_len: 48, task: "t2c".into() };
    let reports = retrieval_eval(&loaded, &vocab, &q, &p, &opts).unwrap();
    assert_eq!(reports, retrieval_eval(&a.ckpt, &vocab, &q, &p, &opts).unwrap());
    assert_eq!(reports.iter().map(|r| r.exit).collect::<Vec<_>>(), [1, 3]);
    let clones = clone_eval(&loaded, &vocab, &pairs, &EvalOptions { task: "clone".into(), ..opts }, 0.5).unwrap();
    for (r, m) in &clones {
        assert_eq!(m.tp + m.fp + m.tn + m.fn_, pairs.len());
        assert!(r.metrics.values().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn f32_and_f64_agree_after_casting() {
    let triplets = gen_triplets(8, 10, &langs()).unwrap();
    let texts: Vec<&str> = triplets.iter().flat_map(|t| [t.nl.as_str(), t.code_a.text.as_str()]).chain([INSTRUCTION_T2C]).collect();
    let vocab = Vocab::build(texts, 2048).unwrap();
    let cfg = small_config(vocab.len());
    let wide = Checkpoint::<f64>::init(cfg.clone(), 2).unwrap();
    let narrow = Checkpoint { params: wide.params.cast::<f32>(&cfg), config: cfg, step: 0 };
    let (q, p) = t2c_task(&triplets);
    let opts = EvalOptions { exits: vec![1, 3], n_distractors: 4, seed: 1, max_len: 48, task: "t2c".into() };
    let a = retrieval_eval(&wide, &vocab, &q, &p, &opts).unwrap();
    let b = retrieval_eval(&narrow, &vocab, &q, &p, &opts).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.metrics["mrr"] - y.metrics["mrr"]).abs() <= 0.1, "{x:?} {y:?}");
    }
}
