use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::ops::l2_normalize;
use super::{Checkpoint, ExitStates, Params, Scalar};
use crate::Result;

/// Adds the exit embedding of `slot` to every row.
pub(crate) fn with_exit_embedding<T: Scalar>(p: &Params<T>, slot: usize, rows: &Array2<T>) -> Array2<T> {
    rows + &p.exit_emb.row(slot)
}

/// Shared MLM head on arbitrary rows of one exit.
pub(crate) fn mlm_logits_rows<T: Scalar>(p: &Params<T>, slot: usize, rows: &Array2<T>) -> Array2<T> {
    with_exit_embedding(p, slot, rows).dot(&p.mlm_w) + &p.mlm_b
}

pub(crate) fn icc_logits_rows<T: Scalar>(p: &Params<T>, slot: usize, pooled: &Array2<T>) -> Array1<T> {
    with_exit_embedding(p, slot, pooled).dot(&p.icc_w) + p.icc_b[0]
}

pub(crate) fn clone_logits_rows<T: Scalar>(p: &Params<T>, slot: usize, pooled: &Array2<T>) -> Array1<T> {
    pooled.dot(&p.clone_w.row(slot)) + p.clone_b[slot]
}

/// Vocabulary logits at every position of `exit`, shape `(batch·seq, vocab)`.
pub fn exit_mlm_logits<T: Scalar>(ckpt: &Checkpoint<T>, states: &ExitStates<T>, exit: usize) -> Result<Array2<T>> {
    let slot = ckpt.config.exit_slot(exit)?;
    Ok(mlm_logits_rows(&ckpt.params, slot, &states.get(exit)?.hidden))
}

/// In-context classification logit of each sequence at `exit`.
pub fn exit_icc_logit<T: Scalar>(ckpt: &Checkpoint<T>, states: &ExitStates<T>, exit: usize) -> Result<Array1<T>> {
    let slot = ckpt.config.exit_slot(exit)?;
    Ok(icc_logits_rows(&ckpt.params, slot, &states.get(exit)?.pooled))
}

/// Clone-detection logit of each sequence from the classifier owned by `exit`.
pub fn clone_logit<T: Scalar>(ckpt: &Checkpoint<T>, states: &ExitStates<T>, exit: usize) -> Result<Array1<T>> {
    let slot = ckpt.config.exit_slot(exit)?;
    Ok(clone_logits_rows(&ckpt.params, slot, &states.get(exit)?.pooled))
}

/// Un-normalized projections `(batch, proj_dim)` of pooled vectors.
pub fn project_raw<T: Scalar>(ckpt: &Checkpoint<T>, pooled: &Array2<T>, exit: usize) -> Result<Array2<T>> {
    let slot = ckpt.config.exit_slot(exit)?;
    Ok(pooled.dot(&ckpt.params.proj[slot]))
}

/// Unit-norm retrieval embedding of one pooled vector.
pub fn project<T: Scalar>(ckpt: &Checkpoint<T>, pooled: ArrayView1<T>, exit: usize) -> Result<Array1<T>> {
    let slot = ckpt.config.exit_slot(exit)?;
    let raw = pooled.dot(&ckpt.params.proj[slot]);
    Ok(l2_normalize(raw.view())?.0)
}

/// Gradient through `y = v/‖v‖` given `y`, `‖v‖` and `dL/dy`.
pub fn project_backward<T: Scalar>(unit: ArrayView1<T>, norm: T, dy: ArrayView1<T>) -> Array1<T> {
    let dot = unit.dot(&dy);
    (&dy - &(&unit * dot)) / norm
}

/// Normalizes every row, returning unit rows and norms.
pub(crate) fn normalize_rows<T: Scalar>(raw: &Array2<T>) -> Result<(Array2<T>, Array1<T>)> {
    let mut unit = Array2::zeros(raw.dim());
    let mut norms = Array1::zeros(raw.nrows());
    for ((row, mut out), n) in raw.outer_iter().zip(unit.outer_iter_mut()).zip(norms.iter_mut()) {
        let (u, k) = l2_normalize(row)?;
        out.assign(&u);
        *n = k;
    }
    Ok((unit, norms))
}

pub(crate) fn normalize_rows_backward<T: Scalar>(unit: &Array2<T>, norms: &Array1<T>, dy: &Array2<T>) -> Array2<T> {
    let mut out = Array2::zeros(dy.dim());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        row.assign(&project_backward(unit.row(i), norms[i], dy.row(i)));
    }
    out
}
