//! Loss functions and the layer-weighted combination across exits.
//!
//! Every per-exit loss is combined as `L = Σ α_i · L_i` with `α_i = i / depth`,
//! so deeper exits dominate while shallow exits still receive signal through
//! the shared heads.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::model::Scalar;
use crate::{Error, Result};

/// Logit multiplier applied to cosine similarities in the contrastive loss.
pub const DEFAULT_TEMPERATURE: f64 = 10.0;

/// Per-exit losses, their weights and the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitLossBreakdown {
    pub exits: Vec<usize>,
    pub losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
}

impl ExitLossBreakdown {
    pub fn loss_at(&self, exit: usize) -> Option<f64> {
        self.exits.iter().position(|&e| e == exit).map(|i| self.losses[i])
    }
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogLine {
    pub step: u64,
    pub exits: Vec<usize>,
    pub losses: Vec<f64>,
    pub alphas: Vec<f64>,
    pub total: f64,
    pub lr: f64,
}

impl LossLogLine {
    pub fn new(step: u64, b: &ExitLossBreakdown, lr: f64) -> Self {
        Self {
            step,
            exits: b.exits.clone(),
            losses: b.losses.clone(),
            alphas: b.weights.clone(),
            total: b.total,
            lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmLoss {
    pub loss: f64,
    /// No target positions; `loss` is 0 and must be left out of averages.
    pub empty: bool,
}

fn log_softmax_row(row: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.map(|x| (x - max).exp()).sum::<f64>().ln();
    (max, lse)
}

/// Mean cross-entropy at `(row, target id)` pairs of a logit matrix.
pub fn mlm_loss<T: Scalar>(logits: &Array2<T>, targets: &[(usize, u32)]) -> Result<MlmLoss> {
    if targets.is_empty() {
        return Ok(MlmLoss { loss: 0.0, empty: true });
    }
    let mut sum = 0.0;
    for &(pos, tgt) in targets {
        if pos >= logits.nrows() || tgt as usize >= logits.ncols() {
            return Err(Error::invalid(format!("target ({pos}, {tgt}) outside logits {:?}", logits.dim())));
        }
        let row = logits.row(pos);
        let (_, lse) = log_softmax_row(row.iter().map(|x| x.to_f64().unwrap()));
        sum += lse - row[tgt as usize].to_f64().unwrap();
    }
    Ok(MlmLoss { loss: sum / targets.len() as f64, empty: false })
}

/// Mean cross-entropy of row `i` against `targets[i]`; gradient w.r.t. the
/// logits scaled by `scale`.
pub(crate) fn softmax_xent_grad<T: Scalar>(logits: &Array2<T>, targets: &[u32], scale: f64) -> (f64, Array2<T>, usize) {
    let n = targets.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    let mut correct = 0;
    for ((row, mut g), &t) in logits.outer_iter().zip(grad.outer_iter_mut()).zip(targets) {
        let (_, lse) = log_softmax_row(row.iter().map(|x| x.to_f64().unwrap()));
        let t = t as usize;
        loss += lse - row[t].to_f64().unwrap();
        for (j, (&z, gj)) in row.iter().zip(g.iter_mut()).enumerate() {
            let z = z.to_f64().unwrap();
            let p = (z - lse).exp();
            *gj = T::from_f64(scale * (p - if j == t { 1.0 } else { 0.0 }) / n).unwrap();
        }
        if argmax(row.iter().map(|x| x.to_f64().unwrap())) == t {
            correct += 1;
        }
    }
    (loss / n, grad, correct)
}

/// First index of the maximum.
pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Numerically stable binary cross-entropy on a logit.
pub fn icc_loss(logit: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean BCE over a batch and `d loss / d logit` for each element.
pub(crate) fn bce_batch(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let loss = logits.iter().zip(targets).map(|(&z, &y)| icc_loss(z, y >= 0.5)).sum::<f64>() / n;
    let grad = logits.iter().zip(targets).map(|(&z, &y)| (sigmoid(z) - y) / n).collect();
    (loss, grad)
}

pub fn pretrain_loss_per_exit(mlm: f64, icc: f64) -> f64 {
    mlm + icc
}

/// `α_i = i / depth` for every exit.
pub fn alphas(exits: &[usize], depth: usize) -> BTreeMap<usize, f64> {
    exits.iter().map(|&e| (e, e as f64 / depth as f64)).collect()
}

/// Weight 1 on a single exit, nothing elsewhere.
pub fn single_exit_weights(exit: usize) -> BTreeMap<usize, f64> {
    BTreeMap::from([(exit, 1.0)])
}

/// Weighted sum with explicit weights; every weighted exit needs a loss.
pub fn combine_with_weights(
    losses: &BTreeMap<usize, f64>,
    weights: &BTreeMap<usize, f64>,
) -> Result<ExitLossBreakdown> {
    let mut out = ExitLossBreakdown { exits: Vec::new(), losses: Vec::new(), weights: Vec::new(), total: 0.0 };
    for (&e, &w) in weights {
        let l = *losses.get(&e).ok_or(Error::UnknownExit(e))?;
        out.exits.push(e);
        out.losses.push(l);
        out.weights.push(w);
        out.total += w * l;
    }
    Ok(out)
}

/// `Σ_{i∈exits} (i/depth) · L_i`.
pub fn multilayer_combine(
    losses: &BTreeMap<usize, f64>,
    exits: &[usize],
    depth: usize,
) -> Result<ExitLossBreakdown> {
    if depth == 0 {
        return Err(Error::invalid("depth must be positive"));
    }
    combine_with_weights(losses, &alphas(exits, depth))
}

fn to_f64<T: Scalar>(a: &Array2<T>) -> Array2<f64> {
    a.mapv(|x| x.to_f64().unwrap())
}

fn check_pair<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("embedding batches differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() < 2 {
        return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
    }
    Ok(())
}

/// Symmetric CLIP loss: cross-entropy of `temperature · A·Bᵀ` against the
/// diagonal, averaged over rows and columns.
pub fn clip_contrastive<T: Scalar>(a: &Array2<T>, b: &Array2<T>, temperature: f64) -> Result<f64> {
    Ok(clip_contrastive_grad(a, b, temperature)?.0)
}

/// Loss and gradients w.r.t. both embedding batches.
pub fn clip_contrastive_grad<T: Scalar>(
    a: &Array2<T>,
    b: &Array2<T>,
    temperature: f64,
) -> Result<(f64, Array2<T>, Array2<T>)> {
    check_pair(a, b)?;
    let (a, b) = (to_f64(a), to_f64(b));
    let n = a.nrows();
    let logits = a.dot(&b.t()) * temperature;
    let mut ds = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    let half_n = 0.5 / n as f64;
    for i in 0..n {
        let (_, lse) = log_softmax_row(logits.row(i).iter().copied());
        loss += lse - logits[[i, i]];
        for j in 0..n {
            ds[[i, j]] += half_n * ((logits[[i, j]] - lse).exp() - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..n {
        let (_, lse) = log_softmax_row(logits.column(j).iter().copied());
        loss += lse - logits[[j, j]];
        for i in 0..n {
            ds[[i, j]] += half_n * ((logits[[i, j]] - lse).exp() - if i == j { 1.0 } else { 0.0 });
        }
    }
    let da = ds.dot(&b) * temperature;
    let db = ds.t().dot(&a) * temperature;
    let cast = |m: Array2<f64>| m.mapv(|x| T::from_f64(x).unwrap());
    Ok((loss * half_n, cast(da), cast(db)))
}

/// Contrastive loss at every exit, combined with layer weights.
pub fn finetune_loss<T: Scalar>(
    emb_a: &BTreeMap<usize, Array2<T>>,
    emb_b: &BTreeMap<usize, Array2<T>>,
    temperature: f64,
    exits: &[usize],
    depth: usize,
) -> Result<ExitLossBreakdown> {
    let mut losses = BTreeMap::new();
    for &e in exits {
        let a = emb_a.get(&e).ok_or(Error::UnknownExit(e))?;
        let b = emb_b.get(&e).ok_or(Error::UnknownExit(e))?;
        losses.insert(e, clip_contrastive(a, b, temperature)?);
    }
    multilayer_combine(&losses, exits, depth)
}

/// Mean BCE of each exit's clone logits against the labels, combined with
/// layer weights.
pub fn clone_loss(
    logits: &BTreeMap<usize, Array1<f64>>,
    labels: &[bool],
    exits: &[usize],
    depth: usize,
) -> Result<ExitLossBreakdown> {
    if labels.is_empty() {
        return Err(Error::invalid("no labels"));
    }
    let mut losses = BTreeMap::new();
    for &e in exits {
        let z = logits.get(&e).ok_or(Error::UnknownExit(e))?;
        if z.len() != labels.len() {
            return Err(Error::invalid("one logit per label required"));
        }
        let l = z.iter().zip(labels).map(|(&z, &y)| icc_loss(z, y)).sum::<f64>() / labels.len() as f64;
        losses.insert(e, l);
    }
    multilayer_combine(&losses, exits, depth)
}
