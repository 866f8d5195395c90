//! Desk-scale laboratory for multi-exit transformer encoders trained with
//! layer-weighted self-distillation.
//!
//! The crate covers the whole pipeline: synthetic repository-structured
//! corpora ([`datagen`]), MinHash near-deduplication ([`dedup`]), a word-level
//! tokenizer ([`tokenizer`]), input packing with in-context classification and
//! MLM masking ([`packing`]), the bidirectional GQA/RoPE encoder with early
//! exits ([`model`]), losses ([`objectives`]), optimization loops
//! ([`training`]) and per-exit evaluation with FLOPs accounting ([`evalkit`]).

pub mod datagen;
pub mod dedup;
mod error;
pub mod evalkit;
pub mod jsonl;
pub mod model;
pub mod objectives;
pub mod packing;
pub mod selfcheck;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

pub use datagen::{CodeText, ProgramSpec, Snippet, Triplet};
pub use dedup::{MinHashSignature, ShingleSet};
pub use evalkit::{ExitReport, RankedList};
pub use model::{Checkpoint, EncoderConfig, ExitStates, Scalar};
pub use objectives::ExitLossBreakdown;
pub use packing::PackedExample;
pub use tokenizer::Vocab;
pub use training::{OptimizerConfig, TrainPlan};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG used by every seeded component.
pub type Rng = ChaCha8Rng;

/// Deterministic RNG stream for `seed`.
pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a tag.
pub fn derive_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
