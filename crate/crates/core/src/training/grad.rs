use std::collections::BTreeMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::model::heads::{normalize_rows, normalize_rows_backward};
use crate::model::{forward_batch, Checkpoint, Params, Scalar, TokenBatch};
use crate::objectives::{bce_batch, clip_contrastive_grad, combine_with_weights, softmax_xent_grad, ExitLossBreakdown};
use crate::packing::PackedExample;
use crate::{Error, Result};

/// Model inputs of one pre-training step.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub tokens: TokenBatch,
    /// `(flattened row, original id)` of every MLM target.
    pub targets: Vec<(usize, u32)>,
    /// 1 for same-repo / next-segment, 0 otherwise.
    pub binary: Vec<f64>,
}

impl PretrainBatch {
    pub fn new(examples: &[PackedExample]) -> Result<Self> {
        let tokens = TokenBatch::from_examples(examples)?;
        let mut targets = Vec::new();
        let mut binary = Vec::with_capacity(examples.len());
        for (b, ex) in examples.iter().enumerate() {
            targets.extend(ex.mlm_targets.iter().map(|&(p, id)| (b * tokens.seq + p, id)));
            binary.push(ex.binary_target().ok_or_else(|| Error::invalid("example has no ICC/NSP label"))?);
        }
        Ok(Self { tokens, targets, binary })
    }
}

/// Correct / total counts of the two pre-training heads at one exit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitAccuracy {
    pub mlm_correct: usize,
    pub mlm_total: usize,
    pub binary_correct: usize,
    pub binary_total: usize,
}

impl ExitAccuracy {
    pub fn add(&mut self, o: &ExitAccuracy) {
        self.mlm_correct += o.mlm_correct;
        self.mlm_total += o.mlm_total;
        self.binary_correct += o.binary_correct;
        self.binary_total += o.binary_total;
    }

    pub fn mlm(&self) -> f64 {
        self.mlm_correct as f64 / self.mlm_total.max(1) as f64
    }

    pub fn binary(&self) -> f64 {
        self.binary_correct as f64 / self.binary_total.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainEval {
    pub breakdown: ExitLossBreakdown,
    pub accuracy: BTreeMap<usize, ExitAccuracy>,
}

fn deepest<T: Scalar>(ckpt: &Checkpoint<T>, weights: &BTreeMap<usize, f64>) -> Result<usize> {
    for &e in weights.keys() {
        ckpt.config.exit_slot(e)?;
    }
    weights.keys().next_back().copied().ok_or_else(|| Error::invalid("no exit weights"))
}

fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).unwrap()
}

/// Binary-head backward shared by the ICC/NSP and clone heads: `x` are the
/// head inputs, `w` the weight vector, `dz` the logit gradients. Returns
/// `dx`.
fn binary_head_backward<T: Scalar>(x: &Array2<T>, w: ndarray::ArrayView1<T>, dz: &[f64], gw: &mut ndarray::ArrayViewMut1<T>, gb: &mut T) -> Array2<T> {
    let dz: Array1<T> = dz.iter().map(|&d| cast(d)).collect();
    *gw += &x.t().dot(&dz);
    *gb += dz.sum();
    let mut dx = Array2::zeros(x.dim());
    for (mut row, &d) in dx.outer_iter_mut().zip(dz.iter()) {
        row.assign(&w.mapv(|v| v * d));
    }
    dx
}

/// Combined pre-training loss (MLM + binary objective at every weighted
/// exit). With `grads` the gradient of the weighted total is accumulated
/// into it.
pub fn pretrain_loss_grad<T: Scalar>(
    ckpt: &Checkpoint<T>,
    batch: &PretrainBatch,
    weights: &BTreeMap<usize, f64>,
    mut grads: Option<&mut Params<T>>,
) -> Result<PretrainEval> {
    let up_to = deepest(ckpt, weights)?;
    let (states, cache) = forward_batch(ckpt, &batch.tokens, up_to)?;
    let p = &ckpt.params;
    let rows: Vec<usize> = batch.targets.iter().map(|t| t.0).collect();
    let ids: Vec<u32> = batch.targets.iter().map(|t| t.1).collect();
    let cls_rows = batch.tokens.cls_rows();
    let mut losses = BTreeMap::new();
    let mut exit_grads = BTreeMap::new();
    let mut accuracy = BTreeMap::new();
    let one = T::one();
    for (&e, &w) in weights {
        let slot = ckpt.config.exit_slot(e)?;
        let st = states.get(e)?;
        let mut acc = ExitAccuracy::default();
        let mut dh = (grads.is_some() && w != 0.0).then(|| Array2::<T>::zeros(st.hidden.dim()));

        let mut mlm = 0.0;
        if !rows.is_empty() {
            let x = st.hidden.select(Axis(0), &rows) + &p.exit_emb.row(slot);
            let logits = x.dot(&p.mlm_w) + &p.mlm_b;
            let (l, dlogits, correct) = softmax_xent_grad(&logits, &ids, w);
            mlm = l;
            acc.mlm_correct = correct;
            acc.mlm_total = rows.len();
            if let (Some(g), Some(dh)) = (grads.as_deref_mut(), dh.as_mut()) {
                general_mat_mul(one, &x.t(), &dlogits, one, &mut g.mlm_w);
                g.mlm_b += &dlogits.sum_axis(Axis(0));
                let dx = dlogits.dot(&p.mlm_w.t());
                let mut ge = g.exit_emb.row_mut(slot);
                ge += &dx.sum_axis(Axis(0));
                for (&r, row) in rows.iter().zip(dx.outer_iter()) {
                    let mut d = dh.row_mut(r);
                    d += &row;
                }
            }
        }

        let x = &st.pooled + &p.exit_emb.row(slot);
        let z: Vec<f64> = (x.dot(&p.icc_w) + p.icc_b[0]).iter().map(|v| v.to_f64().unwrap()).collect();
        let (icc, dz) = bce_batch(&z, &batch.binary);
        acc.binary_total = z.len();
        acc.binary_correct = z.iter().zip(&batch.binary).filter(|(&z, &y)| (z >= 0.0) == (y >= 0.5)).count();
        if let (Some(g), Some(dh)) = (grads.as_deref_mut(), dh.as_mut()) {
            let dz: Vec<f64> = dz.iter().map(|d| d * w).collect();
            let mut gw = g.icc_w.view_mut();
            let dx = binary_head_backward(&x, p.icc_w.view(), &dz, &mut gw, &mut g.icc_b[0]);
            let mut ge = g.exit_emb.row_mut(slot);
            ge += &dx.sum_axis(Axis(0));
            for (&r, row) in cls_rows.iter().zip(dx.outer_iter()) {
                let mut d = dh.row_mut(r);
                d += &row;
            }
        }

        losses.insert(e, mlm + icc);
        accuracy.insert(e, acc);
        if let Some(dh) = dh {
            exit_grads.insert(e, dh);
        }
    }
    let breakdown = combine_with_weights(&losses, weights)?;
    if let Some(g) = grads {
        cache.backward(ckpt, &exit_grads, g)?;
    }
    Ok(PretrainEval { breakdown, accuracy })
}

fn scatter_rows<T: Scalar>(n_rows: usize, rows: &[usize], src: &Array2<T>) -> Array2<T> {
    let mut out = Array2::zeros((n_rows, src.ncols()));
    for (&r, row) in rows.iter().zip(src.outer_iter()) {
        let mut d = out.row_mut(r);
        d += &row;
    }
    out
}

/// Contrastive loss between matched query (`a`) and target (`b`) batches
/// at every weighted exit.
pub fn retrieval_loss_grad<T: Scalar>(
    ckpt: &Checkpoint<T>,
    a: &TokenBatch,
    b: &TokenBatch,
    weights: &BTreeMap<usize, f64>,
    temperature: f64,
    mut grads: Option<&mut Params<T>>,
) -> Result<ExitLossBreakdown> {
    if a.batch != b.batch {
        return Err(Error::invalid("query and target batches differ in size"));
    }
    let up_to = deepest(ckpt, weights)?;
    let (sa, ca) = forward_batch(ckpt, a, up_to)?;
    let (sb, cb) = forward_batch(ckpt, b, up_to)?;
    let p = &ckpt.params;
    let one = T::one();
    let (rows_a, rows_b) = (a.cls_rows(), b.cls_rows());
    let mut losses = BTreeMap::new();
    let mut ga = BTreeMap::new();
    let mut gb = BTreeMap::new();
    for (&e, &w) in weights {
        let slot = ckpt.config.exit_slot(e)?;
        let pa = &sa.get(e)?.pooled;
        let pb = &sb.get(e)?.pooled;
        let (ua, na) = normalize_rows(&pa.dot(&p.proj[slot]))?;
        let (ub, nb) = normalize_rows(&pb.dot(&p.proj[slot]))?;
        let (loss, dua, dub) = clip_contrastive_grad(&ua, &ub, temperature)?;
        losses.insert(e, loss);
        let Some(g) = grads.as_deref_mut() else { continue };
        if w == 0.0 {
            continue;
        }
        let wt: T = cast(w);
        let dra = normalize_rows_backward(&ua, &na, &(dua * wt));
        let drb = normalize_rows_backward(&ub, &nb, &(dub * wt));
        general_mat_mul(one, &pa.t(), &dra, one, &mut g.proj[slot]);
        general_mat_mul(one, &pb.t(), &drb, one, &mut g.proj[slot]);
        let dpa = dra.dot(&p.proj[slot].t());
        let dpb = drb.dot(&p.proj[slot].t());
        ga.insert(e, scatter_rows(a.n_rows(), &rows_a, &dpa));
        gb.insert(e, scatter_rows(b.n_rows(), &rows_b, &dpb));
    }
    let breakdown = combine_with_weights(&losses, weights)?;
    if let Some(g) = grads {
        ca.backward(ckpt, &ga, g)?;
        cb.backward(ckpt, &gb, g)?;
    }
    Ok(breakdown)
}

/// Clone-classification BCE of each exit's own classifier. Also returns the
/// logits per exit.
pub fn clone_loss_grad<T: Scalar>(
    ckpt: &Checkpoint<T>,
    batch: &TokenBatch,
    labels: &[bool],
    weights: &BTreeMap<usize, f64>,
    mut grads: Option<&mut Params<T>>,
) -> Result<(ExitLossBreakdown, BTreeMap<usize, Vec<f64>>)> {
    if labels.len() != batch.batch {
        return Err(Error::invalid("one label per sequence required"));
    }
    let up_to = deepest(ckpt, weights)?;
    let (states, cache) = forward_batch(ckpt, batch, up_to)?;
    let p = &ckpt.params;
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let cls_rows = batch.cls_rows();
    let mut losses = BTreeMap::new();
    let mut all_logits = BTreeMap::new();
    let mut exit_grads = BTreeMap::new();
    for (&e, &w) in weights {
        let slot = ckpt.config.exit_slot(e)?;
        let pooled = &states.get(e)?.pooled;
        let z: Vec<f64> = (pooled.dot(&p.clone_w.row(slot)) + p.clone_b[slot])
            .iter()
            .map(|v| v.to_f64().unwrap())
            .collect();
        let (loss, dz) = bce_batch(&z, &y);
        losses.insert(e, loss);
        all_logits.insert(e, z);
        let Some(g) = grads.as_deref_mut() else { continue };
        if w == 0.0 {
            continue;
        }
        let dz: Vec<f64> = dz.iter().map(|d| d * w).collect();
        let mut gw = g.clone_w.row_mut(slot);
        let dx = binary_head_backward(pooled, p.clone_w.row(slot), &dz, &mut gw, &mut g.clone_b[slot]);
        exit_grads.insert(e, scatter_rows(batch.n_rows(), &cls_rows, &dx));
    }
    let breakdown = combine_with_weights(&losses, weights)?;
    if let Some(g) = grads {
        cache.backward(ckpt, &exit_grads, g)?;
    }
    Ok((breakdown, all_logits))
}
