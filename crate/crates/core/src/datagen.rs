//! Deterministic synthetic corpora.
//!
//! Snippets are rendered from small abstract programs ([`ProgramSpec`]) in a
//! handful of toy languages. Every repository draws its identifiers from a
//! private pool, so repository membership leaves a lexical trace that the
//! in-context classification objective can pick up. Triplets render one
//! program into two different toy languages plus a templated description.

use std::collections::{BTreeSet, HashSet};
use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dedup;
use crate::{derive_rng, seeded_rng, Error, Result};

/// Languages understood by [`render_program`].
pub const TOY_LANGS: [&str; 4] = ["toyA", "toyB", "toyC", "toyD"];

/// Size of the global identifier pool.
pub const GLOBAL_POOL_SIZE: usize = 512;
/// Identifiers sampled per repository.
pub const REPO_POOL_SIZE: usize = 16;
/// Number of triplets in the real fine-tuning dataset. Documentation only.
pub const REFERENCE_TRIPLET_COUNT: usize = 1_071_367;

/// Minimum exact char-5-gram Jaccard of a planted copy against its original.
/// Kept above the 0.7 dedup threshold so MinHash estimation noise cannot hide
/// a planted pair.
pub const PLANT_MIN_JACCARD: f64 = 0.8;

const KEYWORDS: &[&str] = &[
    "for", "in", "range", "print", "printf", "int", "set", "loop", "repeat", "times", "puts",
    "do", "end", "let", "var",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub id: String,
    pub repo_id: String,
    pub lang: String,
    pub text: String,
}

/// Text plus language tag; one code column of a [`Triplet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeText {
    pub text: String,
    pub lang: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub nl: String,
    pub code_a: CodeText,
    pub code_b: CodeText,
}

/// Labeled code pair for clone detection. `label` is `None` for unlabeled data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClonePair {
    pub id: String,
    pub a: CodeText,
    pub b: CodeText,
    pub label: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

impl ArithOp {
    fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
        }
    }

    fn word(self) -> &'static str {
        match self {
            ArithOp::Add => "plus",
            ArithOp::Sub => "minus",
            ArithOp::Mul => "times",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stmt {
    Assign { name: String, value: i64 },
    Arith { dst: String, lhs: String, op: ArithOp, rhs: String },
    Loop { count: u32, target: String, op: ArithOp, value: i64 },
    Print { name: String },
}

/// Abstract program rendered identically (up to syntax) in every toy language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramSpec {
    pub stmts: Vec<Stmt>,
}

impl ProgramSpec {
    /// Samples a program using three distinct identifiers from `idents`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, idents: &[String]) -> ProgramSpec {
        let names: Vec<&String> = idents.choose_multiple(rng, 3).collect();
        let (a, b, c) = (names[0].clone(), names[1].clone(), names[2].clone());
        let ops = [ArithOp::Add, ArithOp::Sub, ArithOp::Mul];
        let mut stmts = vec![
            Stmt::Assign { name: a.clone(), value: rng.random_range(1..100) },
            Stmt::Assign { name: b.clone(), value: rng.random_range(1..100) },
            Stmt::Arith { dst: c.clone(), lhs: a, op: *ops.choose(rng).unwrap(), rhs: b },
        ];
        if rng.random_bool(0.7) {
            stmts.push(Stmt::Loop {
                count: rng.random_range(2..10),
                target: c.clone(),
                op: *ops.choose(rng).unwrap(),
                value: rng.random_range(1..100),
            });
        }
        stmts.push(Stmt::Print { name: c });
        ProgramSpec { stmts }
    }

    /// Literal values in statement order (loop counts included).
    pub fn literals(&self) -> Vec<i64> {
        let mut out = Vec::new();
        for s in &self.stmts {
            match s {
                Stmt::Assign { value, .. } => out.push(*value),
                Stmt::Loop { count, value, .. } => {
                    out.push(i64::from(*count));
                    out.push(*value);
                }
                _ => {}
            }
        }
        out
    }

    /// Templated natural-language description.
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .stmts
            .iter()
            .map(|s| match s {
                Stmt::Assign { name, value } => format!("set {name} to {value}"),
                Stmt::Arith { dst, lhs, op, rhs } => {
                    format!("compute {dst} as {lhs} {} {rhs}", op.word())
                }
                Stmt::Loop { count, target, op, value } => {
                    format!("repeat {count} times {target} {} {value}", op.word())
                }
                Stmt::Print { name } => format!("print {name}"),
            })
            .collect();
        parts.join(" , then ")
    }
}

/// Renders `spec` in toy language `lang`.
pub fn render_program(spec: &ProgramSpec, lang: &str) -> Result<String> {
    let lines: Vec<String> = match lang {
        "toyA" => spec
            .stmts
            .iter()
            .map(|s| match s {
                Stmt::Assign { name, value } => format!("{name} = {value}"),
                Stmt::Arith { dst, lhs, op, rhs } => format!("{dst} = {lhs} {} {rhs}", op.symbol()),
                Stmt::Loop { count, target, op, value } => format!(
                    "for i in range({count}): {target} = {target} {} {value}",
                    op.symbol()
                ),
                Stmt::Print { name } => format!("print({name})"),
            })
            .collect(),
        "toyB" => spec
            .stmts
            .iter()
            .map(|s| match s {
                Stmt::Assign { name, value } => format!("int {name} = {value};"),
                Stmt::Arith { dst, lhs, op, rhs } => {
                    format!("int {dst} = {lhs} {} {rhs};", op.symbol())
                }
                Stmt::Loop { count, target, op, value } => format!(
                    "repeat ({count}) {{ {target} = {target} {} {value}; }}",
                    op.symbol()
                ),
                Stmt::Print { name } => format!("printf({name});"),
            })
            .collect(),
        "toyC" => spec
            .stmts
            .iter()
            .map(|s| match s {
                Stmt::Assign { name, value } => format!("(set {name} {value})"),
                Stmt::Arith { dst, lhs, op, rhs } => {
                    format!("(set {dst} ({} {lhs} {rhs}))", op.symbol())
                }
                Stmt::Loop { count, target, op, value } => format!(
                    "(loop {count} (set {target} ({} {target} {value})))",
                    op.symbol()
                ),
                Stmt::Print { name } => format!("(print {name})"),
            })
            .collect(),
        "toyD" => spec
            .stmts
            .iter()
            .map(|s| match s {
                Stmt::Assign { name, value } => format!("let {name} := {value}"),
                Stmt::Arith { dst, lhs, op, rhs } => {
                    format!("let {dst} := {lhs} {} {rhs}", op.symbol())
                }
                Stmt::Loop { count, target, op, value } => format!(
                    "{count}.times do {target} := {target} {} {value} end",
                    op.symbol()
                ),
                Stmt::Print { name } => format!("puts {name}"),
            })
            .collect(),
        other => return Err(Error::UnsupportedLanguage(other.to_string())),
    };
    Ok(lines.join("\n"))
}

fn check_langs(langs: &[String]) -> Result<()> {
    if langs.is_empty() {
        return Err(Error::invalid("language list is empty"));
    }
    for l in langs {
        if !TOY_LANGS.contains(&l.as_str()) {
            return Err(Error::UnsupportedLanguage(l.clone()));
        }
    }
    Ok(())
}

/// The fixed global identifier pool.
pub fn global_identifier_pool() -> &'static [String] {
    static POOL: OnceLock<Vec<String>> = OnceLock::new();
    POOL.get_or_init(|| {
        const CONSONANTS: &[u8] = b"bcdfghklmnprstvz";
        const VOWELS: &[u8] = b"aeiou";
        let mut rng = seeded_rng(0x1D3E_7F00);
        let mut seen = HashSet::new();
        let mut pool = Vec::with_capacity(GLOBAL_POOL_SIZE);
        while pool.len() < GLOBAL_POOL_SIZE {
            let syllables = rng.random_range(2..=3);
            let mut name = String::new();
            for _ in 0..syllables {
                name.push(*CONSONANTS.choose(&mut rng).unwrap() as char);
                name.push(*VOWELS.choose(&mut rng).unwrap() as char);
            }
            if rng.random_bool(0.5) {
                name.push(*CONSONANTS.choose(&mut rng).unwrap() as char);
            }
            if KEYWORDS.contains(&name.as_str()) || !seen.insert(name.clone()) {
                continue;
            }
            pool.push(name);
        }
        pool
    })
}

/// Identifiers from the global pool that occur in `text`.
pub fn identifiers(text: &str) -> BTreeSet<String> {
    static LOOKUP: OnceLock<HashSet<&'static str>> = OnceLock::new();
    let lookup =
        LOOKUP.get_or_init(|| global_identifier_pool().iter().map(String::as_str).collect());
    text.split(|c: char| !c.is_ascii_alphanumeric() && c != '_')
        .filter(|w| lookup.contains(w))
        .map(str::to_string)
        .collect()
}

/// Generates `n_repos * snippets_per_repo` snippets grouped by repository.
///
/// Each snippet holds one or two programs whose identifiers come from the
/// repository's 16-name pool.
pub fn gen_corpus(
    seed: u64,
    n_repos: usize,
    snippets_per_repo: usize,
    langs: &[String],
) -> Result<Vec<Snippet>> {
    check_langs(langs)?;
    if n_repos > 0 && snippets_per_repo == 0 {
        return Err(Error::invalid("snippets_per_repo must be at least 1"));
    }
    let global = global_identifier_pool();
    let mut out = Vec::with_capacity(n_repos * snippets_per_repo);
    for r in 0..n_repos {
        let mut rng = derive_rng(seed, r as u64);
        let pool: Vec<String> = global.choose_multiple(&mut rng, REPO_POOL_SIZE).cloned().collect();
        let repo_id = format!("repo{r:04}");
        for j in 0..snippets_per_repo {
            let lang = langs.choose(&mut rng).unwrap().clone();
            let n_programs = if rng.random_bool(0.5) { 1 } else { 2 };
            let mut parts = Vec::with_capacity(n_programs);
            for _ in 0..n_programs {
                let spec = ProgramSpec::sample(&mut rng, &pool);
                parts.push(render_program(&spec, &lang)?);
            }
            out.push(Snippet {
                id: format!("{repo_id}/s{j:04}"),
                repo_id: repo_id.clone(),
                lang,
                text: parts.join("\n"),
            });
        }
    }
    Ok(out)
}

/// Generates `n` triplets, each a program rendered into two distinct languages.
pub fn gen_triplets(seed: u64, n: usize, langs: &[String]) -> Result<Vec<Triplet>> {
    check_langs(langs)?;
    if langs.len() < 2 {
        return Err(Error::invalid("triplets need at least two languages"));
    }
    let global = global_identifier_pool();
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let spec = ProgramSpec::sample(&mut rng, global);
        let pair: Vec<&String> = langs.choose_multiple(&mut rng, 2).collect();
        out.push(Triplet {
            id: format!("t{i:06}"),
            nl: spec.describe(),
            code_a: CodeText { text: render_program(&spec, pair[0])?, lang: pair[0].clone() },
            code_b: CodeText { text: render_program(&spec, pair[1])?, lang: pair[1].clone() },
        });
    }
    Ok(out)
}

/// Balanced clone-detection pairs: positives render one program in two
/// languages, negatives pair two unrelated programs.
pub fn gen_clone_pairs(seed: u64, n: usize, langs: &[String]) -> Result<Vec<ClonePair>> {
    check_langs(langs)?;
    let global = global_identifier_pool();
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let positive = i % 2 == 0;
        let spec_a = ProgramSpec::sample(&mut rng, global);
        let spec_b = if positive { spec_a.clone() } else { ProgramSpec::sample(&mut rng, global) };
        let la = langs.choose(&mut rng).unwrap();
        let lb = langs.choose(&mut rng).unwrap();
        out.push(ClonePair {
            id: format!("c{i:06}"),
            a: CodeText { text: render_program(&spec_a, la)?, lang: la.clone() },
            b: CodeText { text: render_program(&spec_b, lb)?, lang: lb.clone() },
            label: Some(positive),
        });
    }
    Ok(out)
}

/// Ground truth for planted copies: `(original_id, copy_id)`.
pub type DuplicateMap = Vec<(String, String)>;

/// Appends near-copies of `round(rate * len)` snippets. A copy renames one
/// identifier by mutating its last character, everywhere it occurs.
pub fn plant_near_duplicates(
    corpus: &[Snippet],
    rate: f64,
    seed: u64,
) -> Result<(Vec<Snippet>, DuplicateMap)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("rate {rate} outside [0, 1]")));
    }
    let target = (rate * corpus.len() as f64).round() as usize;
    let mut rng = seeded_rng(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);

    let mut out = corpus.to_vec();
    let mut map = Vec::with_capacity(target);
    for idx in order {
        if map.len() == target {
            break;
        }
        let orig = &corpus[idx];
        if let Some(text) = renamed_copy(&orig.text, &mut rng) {
            let copy = Snippet {
                id: format!("{}-dup", orig.id),
                repo_id: orig.repo_id.clone(),
                lang: orig.lang.clone(),
                text,
            };
            map.push((orig.id.clone(), copy.id.clone()));
            out.push(copy);
        }
    }
    if map.len() < target {
        return Err(Error::Data(format!(
            "could only plant {} of {target} near-duplicates",
            map.len()
        )));
    }
    Ok((out, map))
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn replace_word(text: &str, from: &str, to: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    for c in text.chars() {
        if is_word_char(c) {
            word.push(c);
        } else {
            out.push_str(if word == from { to } else { &word });
            word.clear();
            out.push(c);
        }
    }
    out.push_str(if word == from { to } else { &word });
    out
}

fn renamed_copy<R: Rng + ?Sized>(text: &str, rng: &mut R) -> Option<String> {
    let words: BTreeSet<&str> = text
        .split(|c: char| !is_word_char(c))
        .filter(|w| w.len() >= 4 && w.chars().all(|c| c.is_ascii_lowercase()))
        .filter(|w| !KEYWORDS.contains(w))
        .collect();
    // Fewest occurrences first: touches the fewest shingles.
    let mut candidates: Vec<(usize, &str)> = words
        .into_iter()
        .map(|w| (text.split(|c: char| !is_word_char(c)).filter(|x| *x == w).count(), w))
        .collect();
    candidates.sort();
    let original = dedup::shingle(text, dedup::DEFAULT_SHINGLE);
    for (_, word) in candidates {
        let stem = &word[..word.len() - 1];
        let last = word.as_bytes()[word.len() - 1];
        let letters: Vec<u8> = (b'a'..=b'z').filter(|&b| b != last).collect();
        let fresh = format!("{stem}{}", *letters.choose(rng).unwrap() as char);
        if text.split(|c: char| !is_word_char(c)).any(|w| w == fresh) {
            continue;
        }
        let copy = replace_word(text, word, &fresh);
        let shingles = dedup::shingle(&copy, dedup::DEFAULT_SHINGLE);
        if dedup::exact_jaccard(&original, &shingles) >= PLANT_MIN_JACCARD {
            return Some(copy);
        }
    }
    None
}

/// Collects every snippet text of a triplet set, for vocabulary building.
pub fn triplet_snippets(triplets: &[Triplet]) -> Vec<Snippet> {
    let mut out = Vec::with_capacity(triplets.len() * 3);
    for t in triplets {
        for (suffix, text, lang) in [
            ("nl", &t.nl, "nl"),
            ("a", &t.code_a.text, t.code_a.lang.as_str()),
            ("b", &t.code_b.text, t.code_b.lang.as_str()),
        ] {
            out.push(Snippet {
                id: format!("{}/{suffix}", t.id),
                repo_id: t.id.clone(),
                lang: lang.to_string(),
                text: text.clone(),
            });
        }
    }
    out
}
