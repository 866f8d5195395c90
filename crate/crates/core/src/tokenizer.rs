//! Word-level vocabulary with five reserved special tokens.
//!
//! Words are maximal runs of ASCII alphanumerics and `_`; every other
//! non-whitespace character is its own token.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::datagen::Snippet;
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const SEP: u32 = 3;
pub const CLS: u32 = 4;
pub const N_SPECIAL: u32 = 5;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[MASK]", "[SEP]", "[CLS]"];

pub fn is_special(id: u32) -> bool {
    id < N_SPECIAL
}

/// Splits text into word and punctuation tokens.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let word = c.is_ascii_alphanumeric() || c == '_';
        if word {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// Canonical spacing: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    pre_tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("vocab slot {i} must hold {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocab token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Most frequent tokens first, ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < N_SPECIAL as usize + 1 {
            return Err(Error::invalid(format!("max_size {max_size} < 6")));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in texts {
            for tok in pre_tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(max_size - tokens.len()).map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Never emits special ids other than `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        pre_tokenize(text)
            .into_iter()
            .map(|t| match self.index.get(t) {
                Some(&id) if !is_special(id) => id,
                _ => UNK,
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let t = self
                .token(id)
                .ok_or(Error::TokenOutOfRange { id, size: self.len() })?;
            parts.push(t);
        }
        Ok(parts.join(" "))
    }

    /// JSON array of tokens in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.tokens)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_tokens(tokens).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

pub fn build_vocab(corpus: &[Snippet], max_size: usize) -> Result<Vocab> {
    Vocab::build(corpus.iter().map(|s| s.text.as_str()), max_size)
}
