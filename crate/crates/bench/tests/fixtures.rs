use mosekit_bench::{corpus, desk_batch, embeddings, ranked_lists};

#[test]
fn fixtures_have_the_advertised_shapes() {
    assert_eq!(corpus(2).len(), 32);
    let (ckpt, batch) = desk_batch(4, 64);
    assert_eq!((batch.tokens.batch, batch.tokens.seq), (4, 64));
    assert_eq!(ckpt.config.depth, 8);
    let lists = ranked_lists(5, 20);
    assert!(lists.iter().all(|l| l.candidates.len() == 20 && l.relevant.len() == 3));
    let v = embeddings(10, 8);
    assert!(v.iter().all(|(_, x)| (x.dot(x) - 1.0).abs() < 1e-12));
}
