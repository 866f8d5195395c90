//! MinHash LSH near-deduplication over character 5-gram shingles.
//!
//! Signatures use a seeded universal hash family `h(x) = (a·x + b) mod p`
//! with `p = 2^61 − 1` applied to a 64-bit FNV-1a hash of each shingle.
//! Candidate pairs come from banded LSH (32 bands × 8 rows for 256
//! permutations) and are confirmed by the estimated Jaccard.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Snippet, Triplet};
use crate::{seeded_rng, Error, Result};

pub const DEFAULT_SHINGLE: usize = 5;
pub const DEFAULT_PERMUTATIONS: usize = 256;
pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_BANDS: usize = 32;

const MERSENNE_61: u64 = (1 << 61) - 1;

/// Set of character k-grams.
pub type ShingleSet = BTreeSet<String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub values: Vec<u64>,
    pub n_perm: usize,
    pub seed: u64,
}

/// All contiguous `k`-grams of `text`, counted in code points.
pub fn shingle(text: &str, k: usize) -> ShingleSet {
    assert!(k >= 1, "shingle width must be positive");
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < k {
        return ShingleSet::new();
    }
    chars.windows(k).map(|w| w.iter().collect()).collect()
}

/// Exact set Jaccard. Two empty sets are identical (1.0).
pub fn exact_jaccard(a: &ShingleSet, b: &ShingleSet) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mod_mersenne(x: u128) -> u64 {
    let p = u128::from(MERSENNE_61);
    let mut r = (x & p) + (x >> 61);
    while r >= p {
        r -= p;
    }
    r as u64
}

/// Seeded permutation family shared by every signature with the same
/// `(n_perm, seed)`.
#[derive(Debug, Clone)]
pub struct PermutationFamily {
    coeffs: Vec<(u64, u64)>,
    seed: u64,
}

impl PermutationFamily {
    pub fn new(n_perm: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let coeffs = (0..n_perm)
            .map(|_| (rng.random_range(1..MERSENNE_61), rng.random_range(0..MERSENNE_61)))
            .collect();
        Self { coeffs, seed }
    }

    pub fn n_perm(&self) -> usize {
        self.coeffs.len()
    }

    pub fn signature(&self, s: &ShingleSet) -> Result<MinHashSignature> {
        if s.is_empty() {
            return Err(Error::EmptyShingleSet);
        }
        let mut values = vec![u64::MAX; self.coeffs.len()];
        for sh in s {
            let x = u128::from(fnv1a(sh.as_bytes()) % MERSENNE_61);
            for (v, &(a, b)) in values.iter_mut().zip(&self.coeffs) {
                let h = mod_mersenne(u128::from(a) * x + u128::from(b));
                if h < *v {
                    *v = h;
                }
            }
        }
        Ok(MinHashSignature { values, n_perm: self.coeffs.len(), seed: self.seed })
    }
}

pub fn minhash(s: &ShingleSet, n_perm: usize, seed: u64) -> Result<MinHashSignature> {
    PermutationFamily::new(n_perm, seed).signature(s)
}

/// Fraction of signature positions that agree.
pub fn est_jaccard(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64> {
    if a.n_perm != b.n_perm || a.values.len() != b.values.len() {
        return Err(Error::SignatureMismatch(format!(
            "n_perm {} vs {}",
            a.n_perm, b.n_perm
        )));
    }
    if a.seed != b.seed {
        return Err(Error::SignatureMismatch(format!("seed {} vs {}", a.seed, b.seed)));
    }
    let agree = a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.n_perm as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DedupParams {
    pub threshold: f64,
    pub n_perm: usize,
    pub bands: usize,
    pub shingle: usize,
    pub seed: u64,
}

impl Default for DedupParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            n_perm: DEFAULT_PERMUTATIONS,
            bands: DEFAULT_BANDS,
            shingle: DEFAULT_SHINGLE,
            seed: 0,
        }
    }
}

impl DedupParams {
    fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::invalid(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        if self.bands == 0 || self.n_perm % self.bands != 0 {
            return Err(Error::invalid(format!(
                "{} bands do not divide {} permutations",
                self.bands, self.n_perm
            )));
        }
        Ok(())
    }

    fn rows(&self) -> usize {
        self.n_perm / self.bands
    }
}

fn band_key(values: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a(&bytes)
}

/// Banded LSH table over signatures; `None` marks items with no shingles.
struct LshTable {
    rows: usize,
    buckets: Vec<HashMap<u64, Vec<usize>>>,
}

impl LshTable {
    fn new(bands: usize, rows: usize) -> Self {
        Self { rows, buckets: vec![HashMap::new(); bands] }
    }

    fn insert(&mut self, idx: usize, sig: &MinHashSignature) {
        for (band, table) in self.buckets.iter_mut().enumerate() {
            let key = band_key(&sig.values[band * self.rows..(band + 1) * self.rows]);
            table.entry(key).or_default().push(idx);
        }
    }

    fn candidates(&self, sig: &MinHashSignature) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for (band, table) in self.buckets.iter().enumerate() {
            let key = band_key(&sig.values[band * self.rows..(band + 1) * self.rows]);
            if let Some(v) = table.get(&key) {
                out.extend(v.iter().copied());
            }
        }
        out
    }
}

fn signatures(texts: &[&str], p: &DedupParams) -> Vec<Option<MinHashSignature>> {
    let family = PermutationFamily::new(p.n_perm, p.seed);
    texts.iter().map(|t| family.signature(&shingle(t, p.shingle)).ok()).collect()
}

/// Verified duplicate pairs `(i, j)` with `i < j` among `texts`.
pub fn duplicate_pairs(texts: &[&str], p: &DedupParams) -> Result<Vec<(usize, usize)>> {
    p.validate()?;
    let sigs = signatures(texts, p);
    let mut table = LshTable::new(p.bands, p.rows());
    for (i, s) in sigs.iter().enumerate() {
        if let Some(s) = s {
            table.insert(i, s);
        }
    }
    let mut pairs = Vec::new();
    for (j, sj) in sigs.iter().enumerate() {
        let Some(sj) = sj else { continue };
        for i in table.candidates(sj) {
            if i >= j {
                continue;
            }
            let si = sigs[i].as_ref().expect("indexed signatures exist");
            if est_jaccard(si, sj)? >= p.threshold {
                pairs.push((i, j));
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupOutcome {
    pub kept: Vec<Snippet>,
    /// `(removed_id, kept_id)`
    pub removed: Vec<(String, String)>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Clusters near-duplicates and keeps the lexicographically smallest id of
/// each cluster. Snippets too short to shingle are always kept.
pub fn lsh_dedup(snippets: &[Snippet], p: &DedupParams) -> Result<DedupOutcome> {
    let texts: Vec<&str> = snippets.iter().map(|s| s.text.as_str()).collect();
    let pairs = duplicate_pairs(&texts, p)?;
    let mut parent: Vec<usize> = (0..snippets.len()).collect();
    for (i, j) in pairs {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            // Root is always the smallest id seen so far in the cluster.
            if snippets[ri].id <= snippets[rj].id {
                parent[rj] = ri;
            } else {
                parent[ri] = rj;
            }
        }
    }
    let mut out = DedupOutcome::default();
    for i in 0..snippets.len() {
        let root = find(&mut parent, i);
        if root == i {
            out.kept.push(snippets[i].clone());
        } else {
            out.removed.push((snippets[i].id.clone(), snippets[root].id.clone()));
        }
    }
    Ok(out)
}

/// Drops every triplet whose `code_a` or `code_b` is a near-duplicate of the
/// same column of an earlier kept triplet. Returns kept triplets and
/// `(removed_id, kept_id)` pairs.
pub fn dedup_triplets(
    triplets: &[Triplet],
    p: &DedupParams,
) -> Result<(Vec<Triplet>, Vec<(String, String)>)> {
    p.validate()?;
    let col_a: Vec<&str> = triplets.iter().map(|t| t.code_a.text.as_str()).collect();
    let col_b: Vec<&str> = triplets.iter().map(|t| t.code_b.text.as_str()).collect();
    let sigs = [signatures(&col_a, p), signatures(&col_b, p)];
    let mut tables = [LshTable::new(p.bands, p.rows()), LshTable::new(p.bands, p.rows())];
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    'outer: for j in 0..triplets.len() {
        for col in 0..2 {
            if let Some(sj) = &sigs[col][j] {
                for i in tables[col].candidates(sj) {
                    let si = sigs[col][i].as_ref().expect("indexed signatures exist");
                    if est_jaccard(si, sj)? >= p.threshold {
                        removed.push((triplets[j].id.clone(), triplets[i].id.clone()));
                        continue 'outer;
                    }
                }
            }
        }
        for col in 0..2 {
            if let Some(sj) = &sigs[col][j] {
                tables[col].insert(j, sj);
            }
        }
        kept.push(triplets[j].clone());
    }
    Ok((kept, removed))
}

const CACHE_MAGIC: &[u8; 8] = b"MSKMHSIG";
const CACHE_ID_WIDTH: usize = 64;

/// Writes a signature cache: magic, `n_perm` (u32), seed (u64), record count
/// (u64), then per record a 64-byte zero-padded id and `n_perm` u64 values,
/// all little-endian.
pub fn write_signature_cache(path: &Path, records: &[(String, MinHashSignature)]) -> Result<()> {
    let (n_perm, seed) = match records.first() {
        Some((_, s)) => (s.n_perm, s.seed),
        None => (DEFAULT_PERMUTATIONS, 0),
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(n_perm as u32).to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (id, sig) in records {
        if sig.n_perm != n_perm || sig.seed != seed {
            return Err(Error::SignatureMismatch(format!("record {id} has a different lineage")));
        }
        if id.len() > CACHE_ID_WIDTH {
            return Err(Error::invalid(format!("id `{id}` longer than {CACHE_ID_WIDTH} bytes")));
        }
        let mut buf = [0u8; CACHE_ID_WIDTH];
        buf[..id.len()].copy_from_slice(id.as_bytes());
        w.write_all(&buf)?;
        for v in &sig.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_signature_cache(path: &Path) -> Result<Vec<(String, MinHashSignature)>> {
    let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let n_perm = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut idbuf = [0u8; CACHE_ID_WIDTH];
        r.read_exact(&mut idbuf)?;
        let end = idbuf.iter().position(|&b| b == 0).unwrap_or(CACHE_ID_WIDTH);
        let id = String::from_utf8(idbuf[..end].to_vec()).map_err(|_| bad("id is not UTF-8"))?;
        let mut values = Vec::with_capacity(n_perm);
        for _ in 0..n_perm {
            r.read_exact(&mut b8)?;
            values.push(u64::from_le_bytes(b8));
        }
        out.push((id, MinHashSignature { values, n_perm, seed }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_corpus, plant_near_duplicates};

    fn set(xs: &[&str]) -> ShingleSet {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn snip(id: &str, text: &str) -> Snippet {
        Snippet { id: id.into(), repo_id: "r".into(), lang: "toyA".into(), text: text.into() }
    }

    #[test]
    fn shingle_examples() {
        assert_eq!(shingle("abcde", 5), set(&["abcde"]));
        assert_eq!(shingle("abcdef", 5), set(&["abcde", "bcdef"]));
        assert!(shingle("ab", 5).is_empty());
        // code points, not bytes
        assert_eq!(shingle("αβγδε", 5).len(), 1);
        assert_eq!(shingle("aaaaaaa", 5).len(), 1);
    }

    #[test]
    fn identical_sets_identical_signatures() {
        let s = shingle("the quick brown fox jumps", 5);
        let a = minhash(&s, 256, 9).unwrap();
        assert_eq!(a, minhash(&s, 256, 9).unwrap());
        assert_eq!(a.values.len(), 256);
        assert_eq!(est_jaccard(&a, &a).unwrap(), 1.0);
        assert!(matches!(minhash(&ShingleSet::new(), 256, 9), Err(Error::EmptyShingleSet)));
    }

    #[test]
    fn disjoint_sets_estimate_near_zero() {
        let a: ShingleSet = (0..100).map(|i| format!("a{i:04}")).collect();
        let b: ShingleSet = (0..100).map(|i| format!("b{i:04}")).collect();
        assert_eq!(exact_jaccard(&a, &b), 0.0);
        let e = est_jaccard(&minhash(&a, 256, 1).unwrap(), &minhash(&b, 256, 1).unwrap()).unwrap();
        assert!(e < 0.05, "estimate {e}");
    }

    #[test]
    fn mismatched_lineage_is_an_error() {
        let s = shingle("abcdefgh", 5);
        let a = minhash(&s, 256, 1).unwrap();
        assert!(est_jaccard(&a, &minhash(&s, 128, 1).unwrap()).is_err());
        assert!(est_jaccard(&a, &minhash(&s, 256, 2).unwrap()).is_err());
    }

    #[test]
    fn no_duplicates_nothing_removed() {
        let c = vec![
            snip("a", "completely different text number one"),
            snip("b", "another unrelated line with content"),
        ];
        let out = lsh_dedup(&c, &DedupParams::default()).unwrap();
        assert!(out.removed.is_empty());
        assert_eq!(out.kept.len(), 2);
    }

    #[test]
    fn identical_snippets_keep_smallest_id() {
        let c = vec![snip("z", "x = 1\ny = 2\nprint(y)"), snip("m", "x = 1\ny = 2\nprint(y)")];
        let out = lsh_dedup(&c, &DedupParams::default()).unwrap();
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].id, "m");
        assert_eq!(out.removed, vec![("z".to_string(), "m".to_string())]);
    }

    #[test]
    fn planted_duplicates_removed_and_idempotent() {
        let langs: Vec<String> = ["toyA", "toyB", "toyC"].iter().map(|s| s.to_string()).collect();
        let c = gen_corpus(21, 10, 10, &langs).unwrap();
        let (planted, map) = plant_near_duplicates(&c, 0.1, 4).unwrap();
        let out = lsh_dedup(&planted, &DedupParams::default()).unwrap();
        let removed: BTreeSet<_> = out.removed.iter().map(|(r, _)| r.clone()).collect();
        let kept: BTreeSet<_> = out.kept.iter().map(|s| s.id.clone()).collect();
        for (orig, copy) in &map {
            assert!(removed.contains(copy), "{copy} survived");
            assert!(kept.contains(orig), "{orig} removed");
        }
        let again = lsh_dedup(&out.kept, &DedupParams::default()).unwrap();
        assert!(again.removed.is_empty());
    }

    #[test]
    fn triplet_dedup_checks_both_columns() {
        use crate::datagen::{CodeText, Triplet};
        let code = |t: &str| CodeText { text: t.into(), lang: "toyA".into() };
        let base = "alpha = 12\nbeta = 7\ngamma = alpha + beta\nprint(gamma)";
        let t = |id: &str, a: &str, b: &str| Triplet {
            id: id.into(),
            nl: "n".into(),
            code_a: code(a),
            code_b: code(b),
        };
        let ts = vec![
            t("t0", base, "(set foo 1)\n(print foo)"),
            t("t1", "unrelated text here entirely", base),
            t("t2", "something else again and more", "(set foo 1)\n(print foo)"),
        ];
        let (kept, removed) = dedup_triplets(&ts, &DedupParams::default()).unwrap();
        // t1 matches t0 only across columns, so it survives; t2 repeats t0's code_b.
        assert_eq!(kept.iter().map(|t| t.id.as_str()).collect::<Vec<_>>(), ["t0", "t1"]);
        assert_eq!(removed, vec![("t2".to_string(), "t0".to_string())]);
    }

    #[test]
    fn signature_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.bin");
        let fam = PermutationFamily::new(256, 3);
        let recs: Vec<_> = ["abcdefg", "hijklmnop"]
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("id{i}"), fam.signature(&shingle(t, 5)).unwrap()))
            .collect();
        write_signature_cache(&path, &recs).unwrap();
        assert_eq!(read_signature_cache(&path).unwrap(), recs);
    }

    proptest::proptest! {
        #[test]
        fn estimate_is_symmetric(a in proptest::collection::btree_set("[a-e]{5}", 1..40),
                                 b in proptest::collection::btree_set("[a-e]{5}", 1..40)) {
            let fam = PermutationFamily::new(64, 5);
            let (sa, sb) = (fam.signature(&a).unwrap(), fam.signature(&b).unwrap());
            proptest::prop_assert_eq!(est_jaccard(&sa, &sb).unwrap(), est_jaccard(&sb, &sa).unwrap());
        }
    }
}
