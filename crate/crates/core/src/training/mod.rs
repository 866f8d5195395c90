//! Optimization: AdamW with a warmup + multi-step schedule, gradient kernels
//! for every objective, and the pre-training / fine-tuning loops.

mod grad;
mod loops;

pub use grad::{
    clone_loss_grad, pretrain_loss_grad, retrieval_loss_grad, ExitAccuracy, PretrainBatch,
    PretrainEval,
};
pub use loops::{
    augment_code, encode_retrieval_batch, finetune_clone, finetune_retrieval, pack_clone_pairs, pretrain,
    pretrain_accuracy, sample_pretrain_batch, sample_retrieval_batch, PairKind,
    RetrievalExample, TrainOutcome, INSTRUCTION_C2C, INSTRUCTION_T2C,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{EncoderConfig, Params, Scalar};
use crate::objectives::{alphas, single_exit_weights, DEFAULT_TEMPERATURE};
use crate::packing::{DEFAULT_MASK_RATE, DEFAULT_P_CROSS, MIN_PACK_LEN};
use crate::{Error, Result};

/// Full-length decay schedule as (fraction of the 240k-step run, absolute factor).
const FULL_MILESTONES: [(u64, f64); 5] =
    [(120_000, 0.36), (185_000, 0.1), (220_000, 0.031), (230_000, 0.01), (240_000, 0.001)];
const FULL_STEPS: u64 = 240_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    /// `(step, factor)`: from `step` on the rate is `factor · base_lr`.
    pub milestones: Vec<(u64, f64)>,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl OptimizerConfig {
    fn with_lr(base_lr: f64, warmup_steps: u64, milestones: Vec<(u64, f64)>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-6,
            weight_decay: 0.1,
            base_lr,
            warmup_steps,
            milestones,
            clip_norm: 1.0,
        }
    }

    pub fn full_pretrain() -> Self {
        Self::with_lr(6.24e-4, 4000, FULL_MILESTONES.to_vec())
    }

    /// Constant rate used for both fine-tuning tasks.
    pub fn full_finetune() -> Self {
        Self::with_lr(1e-5, 0, Vec::new())
    }

    pub fn full_clone() -> Self {
        Self::with_lr(1e-5, 2000, Vec::new())
    }

    /// Full-length schedule shape compressed onto a run of `steps` updates.
    pub fn desk_pretrain(steps: u64) -> Self {
        let scale = |s: u64| ((s as f64 / FULL_STEPS as f64) * steps as f64).round() as u64;
        let mut ms: Vec<(u64, f64)> = Vec::new();
        for (s, f) in FULL_MILESTONES {
            let at = scale(s).max(1);
            if ms.last().is_none_or(|&(prev, _)| at > prev) {
                ms.push((at, f));
            }
        }
        Self::with_lr(2e-3, (steps / 40).max(1), ms)
    }

    pub fn desk_finetune() -> Self {
        Self::with_lr(1e-3, 0, Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            bad.push(format!("beta1 {} outside (0, 1)", self.beta1));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            bad.push(format!("beta2 {} outside (0, 1)", self.beta2));
        }
        if self.eps <= 0.0 {
            bad.push(format!("eps {} must be positive", self.eps));
        }
        if self.base_lr < 0.0 || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            bad.push("base_lr, weight_decay and clip_norm must be non-negative".into());
        }
        if self.milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            bad.push("milestones must be strictly increasing".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }
}

/// Linear warmup from 0, then `base_lr` times the factor of the last
/// milestone reached.
pub fn lr_at(step: u64, cfg: &OptimizerConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let factor = cfg
        .milestones
        .iter()
        .take_while(|(s, _)| *s <= step)
        .last()
        .map_or(1.0, |&(_, f)| f);
    cfg.base_lr * factor
}

/// First and second moments plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(like: &Params<T>) -> Self {
        Self { m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }
}

/// Decoupled weight decay followed by the bias-corrected Adam update.
pub fn adamw_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &Params<T>,
    state: &mut AdamState<T>,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { step: state.t, what: format!("gradient {name}[{i}]") });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c = |x: f64| T::from_f64(x).unwrap();
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let (one_b1, one_b2) = (c(1.0 - cfg.beta1), c(1.0 - cfg.beta2));
    let bc1 = c(1.0 - cfg.beta1.powi(t));
    let bc2 = c(1.0 - cfg.beta2.powi(t));
    let decay = c(1.0 - lr * cfg.weight_decay);
    let (lr, eps) = (c(lr), c(cfg.eps));
    let ps = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((_, p), (_, m)), (_, v)), (_, g)) in ps.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *p *= decay;
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Params<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64(max_norm / norm).unwrap();
        for (_, t) in grads.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    FinetuneRetrieval,
    FinetuneClone,
}

/// Binary sequence objective used next to MLM during pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryObjective {
    #[default]
    Icc,
    Nsp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub mode: TrainMode,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train one exit alone with its bare loss (ablation baseline).
    pub single_exit: Option<usize>,
    pub augmentation_rate: f64,
    pub objective: BinaryObjective,
    pub max_len: usize,
    pub mask_rate: f64,
    pub p_cross: f64,
    pub temperature: f64,
}

impl TrainPlan {
    pub fn desk(mode: TrainMode) -> Self {
        Self {
            mode,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            single_exit: None,
            augmentation_rate: 0.3,
            objective: BinaryObjective::Icc,
            max_len: 128,
            mask_rate: DEFAULT_MASK_RATE,
            p_cross: DEFAULT_P_CROSS,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let mut bad = Vec::new();
        if let Some(e) = self.single_exit {
            if !cfg.exits.contains(&e) {
                bad.push(format!("single_exit {e} is not an exit of {:?}", cfg.exits));
            }
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".into());
        }
        if self.max_len < MIN_PACK_LEN || self.max_len > cfg.max_seq {
            bad.push(format!("max_len {} outside [{MIN_PACK_LEN}, {}]", self.max_len, cfg.max_seq));
        }
        for (name, v) in [
            ("augmentation_rate", self.augmentation_rate),
            ("mask_rate", self.mask_rate),
            ("p_cross", self.p_cross),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bad.push(format!("{name} {v} outside [0, 1]"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }

    /// Exit weights of the loss: `α_i` over all exits, or 1 on the
    /// single ablation exit.
    pub fn weights(&self, cfg: &EncoderConfig) -> BTreeMap<usize, f64> {
        match self.single_exit {
            Some(e) => single_exit_weights(e),
            None => alphas(&cfg.exits, cfg.depth),
        }
    }
}
