//! Bidirectional multi-exit transformer encoder.
//!
//! Pre-norm blocks with grouped-query full attention and rotary position
//! encoding. Hidden states at every exit layer pass through a shared final
//! layer norm; the MLM and in-context heads are shared across exits and
//! receive a learned per-exit embedding, while retrieval projections and
//! clone classifiers are owned by each exit.

mod config;
mod encoder;
pub(crate) mod heads;
mod ops;
mod params;

pub use config::EncoderConfig;
pub use encoder::{
    forward, forward_batch, gqa_attention, gqa_attention_probs, ExitState, ExitStates,
    ForwardCache, TokenBatch,
};
pub use heads::{
    clone_logit, exit_icc_logit, exit_mlm_logits, project, project_backward, project_raw,
};
pub use ops::{l2_normalize, rope_rotate, LN_EPS};
pub use params::{Checkpoint, InitOptions, LayerParams, Params, CHECKPOINT_VERSION};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type: `f32` for training, `f64` for checks.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// `exp` used by softmax and GELU; may trade the last ulp for speed.
    fn fast_exp(self) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    /// Range reduction to `r ∈ [-ln2/2, ln2/2]` and a degree-6 polynomial;
    /// branch-free so loops over it vectorize.
    #[inline(always)]
    fn fast_exp(self) -> f32 {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_359_4;
        const LN2_LO: f32 = -2.121_944_4e-4;
        const ROUND: f32 = 12_582_912.0; // 1.5 · 2^23
        let x = self.clamp(-87.0, 88.0);
        let n = (x * LOG2E + ROUND) - ROUND;
        let r = x - n * LN2_HI - n * LN2_LO;
        let mut p = 1.987_569_1e-4f32;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 1.666_666_5e-1;
        p = p * r + 5.000_000_1e-1;
        let e = p * r * r + r + 1.0;
        e * f32::from_bits(((n as i32 + 127) as u32) << 23)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    #[inline(always)]
    fn fast_exp(self) -> f64 {
        self.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::Scalar;

    #[test]
    fn fast_exp_f32_is_accurate() {
        let mut worst = 0.0f32;
        for i in -8700..8800 {
            let x = i as f32 * 0.01;
            let rel = (x.fast_exp() - x.exp()).abs() / x.exp();
            worst = worst.max(rel);
        }
        assert!(worst < 1e-6, "{worst}");
        assert_eq!((-1e4f32).fast_exp() < 1e-37, true);
        assert!(1e4f32.fast_exp().is_finite());
    }
}

#[inline]
pub(crate) fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite cast")
}
