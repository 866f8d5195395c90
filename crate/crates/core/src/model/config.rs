use serde::{Deserialize, Serialize};

use crate::packing::MIN_PACK_LEN;
use crate::tokenizer::N_SPECIAL;
use crate::{Error, Result};

/// Architecture hyperparameters. `exits` is the ascending exit set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub exits: Vec<usize>,
    pub hidden: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub intermediate: usize,
    pub rope_theta: f64,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub proj_dim: usize,
}

impl EncoderConfig {
    /// Full-size architecture: 36 layers, 16 query / 4 key-value heads.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            depth: 36,
            exits: vec![4, 9, 18, 27, 36],
            hidden: 1024,
            n_heads: 16,
            n_kv_heads: 4,
            intermediate: 12_288,
            rope_theta: 1e6,
            vocab_size,
            max_seq: 2048,
            proj_dim: 1024,
        }
    }

    /// Desk-scale default.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            depth: 8,
            exits: vec![1, 2, 4, 6, 8],
            hidden: 64,
            n_heads: 4,
            n_kv_heads: 2,
            intermediate: 256,
            rope_theta: 1e6,
            vocab_size,
            max_seq: 128,
            proj_dim: 32,
        }
    }

    /// Smallest configuration used for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            depth: 2,
            exits: vec![1, 2],
            hidden: 8,
            n_heads: 2,
            n_kv_heads: 1,
            intermediate: 16,
            rope_theta: 1e6,
            vocab_size,
            max_seq: 16,
            proj_dim: 4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads.max(1)
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads.max(1)
    }

    pub fn max_exit(&self) -> usize {
        *self.exits.last().expect("validated config has exits")
    }

    /// Position of `exit` inside the exit set.
    pub fn exit_slot(&self, exit: usize) -> Result<usize> {
        self.exits.iter().position(|&e| e == exit).ok_or(Error::UnknownExit(exit))
    }

    /// Checks every structural invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.depth == 0 {
            bad.push("depth must be positive".to_string());
        }
        if self.exits.is_empty() {
            bad.push("exit set is empty".to_string());
        }
        if self.exits.windows(2).any(|w| w[0] >= w[1]) {
            bad.push(format!("exit set {:?} is not strictly ascending", self.exits));
        }
        if let Some(&e) = self.exits.iter().find(|&&e| e == 0 || e > self.depth) {
            bad.push(format!("exit {e} outside 1..={}", self.depth));
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 {
            bad.push("head counts must be positive".to_string());
        } else {
            if self.n_heads % self.n_kv_heads != 0 {
                bad.push(format!(
                    "n_heads {} not divisible by n_kv_heads {}",
                    self.n_heads, self.n_kv_heads
                ));
            }
            if self.hidden % self.n_heads != 0 {
                bad.push(format!("hidden {} not divisible by n_heads {}", self.hidden, self.n_heads));
            } else if self.head_dim() % 2 != 0 {
                bad.push(format!("head dimension {} is odd", self.head_dim()));
            }
        }
        if self.intermediate == 0 || self.proj_dim == 0 {
            bad.push("intermediate and proj_dim must be positive".to_string());
        }
        if !(self.rope_theta > 0.0) {
            bad.push(format!("rope_theta {} must be positive", self.rope_theta));
        }
        if self.vocab_size <= N_SPECIAL as usize {
            bad.push(format!("vocab_size {} leaves no room past the special tokens", self.vocab_size));
        }
        if self.max_seq < MIN_PACK_LEN {
            bad.push(format!("max_seq {} < {MIN_PACK_LEN}", self.max_seq));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }

    /// Parameter count implied by the architecture.
    pub fn n_params(&self) -> usize {
        let h = self.hidden;
        let kv = self.kv_dim();
        let layer = 2 * h // ln1
            + h * h + h // q
            + 2 * (h * kv + kv) // k, v
            + h * h + h // o
            + 2 * h // ln2
            + h * self.intermediate + self.intermediate
            + self.intermediate * h + h;
        let n_exit = self.exits.len();
        self.vocab_size * h
            + self.depth * layer
            + 2 * h
            + n_exit * h
            + h * self.vocab_size + self.vocab_size
            + h + 1
            + n_exit * h * self.proj_dim
            + n_exit * h + n_exit
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        EncoderConfig::full_scale(49_152).validate().unwrap();
        EncoderConfig::desk(500).validate().unwrap();
        EncoderConfig::tiny(16).validate().unwrap();
    }

    #[test]
    fn full_scale_is_about_one_billion() {
        let n = EncoderConfig::full_scale(49_152).n_params() as f64;
        assert!((0.8e9..1.5e9).contains(&n), "{n}");
    }

    #[test]
    fn violations_are_reported() {
        let mut c = EncoderConfig::full_scale(49_152);
        c.exits = vec![40];
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("exit 40"), "{msg}");

        let mut c = EncoderConfig::desk(100);
        c.n_kv_heads = 3;
        c.hidden = 60; // head_dim 15: odd
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("not divisible") && msg.contains("odd"), "{msg}");
        assert!(matches!(c.exit_slot(3), Err(Error::UnknownExit(3))));
    }
}
