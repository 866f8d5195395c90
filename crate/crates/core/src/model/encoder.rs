use std::collections::BTreeMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::ops::{gelu_grad_from, gelu_tanh, layer_norm, layer_norm_backward, softmax_rows, LnCache, RopeTable};
use super::{cast, Checkpoint, EncoderConfig, LayerParams, Params, Scalar};
use crate::packing::PackedExample;
use crate::{Error, Result};

/// A batch of equal-length token sequences, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    pub cls_pos: Vec<usize>,
}

impl TokenBatch {
    pub fn single(ids: &[u32], valid: &[bool]) -> Result<Self> {
        if ids.len() != valid.len() || ids.is_empty() {
            return Err(Error::invalid("ids and valid_mask must be non-empty and equally long"));
        }
        let cls = valid.iter().rposition(|&v| v).ok_or_else(|| Error::invalid("no valid token"))?;
        Ok(Self {
            ids: ids.to_vec(),
            valid: valid.to_vec(),
            batch: 1,
            seq: ids.len(),
            cls_pos: vec![cls],
        })
    }

    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a PackedExample>) -> Result<Self> {
        let mut out = TokenBatch { ids: Vec::new(), valid: Vec::new(), batch: 0, seq: 0, cls_pos: Vec::new() };
        for ex in examples {
            if out.batch == 0 {
                out.seq = ex.ids.len();
            } else if ex.ids.len() != out.seq {
                return Err(Error::invalid("examples in a batch must share one length"));
            }
            out.ids.extend_from_slice(&ex.ids);
            out.valid.extend_from_slice(&ex.valid_mask);
            out.cls_pos.push(ex.cls_pos);
            out.batch += 1;
        }
        if out.batch == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok(out)
    }

    pub fn n_rows(&self) -> usize {
        self.batch * self.seq
    }

    /// Drops leading columns that are padding in every sequence. Rotary
    /// attention only sees relative offsets, so the valid rows keep their
    /// states up to rounding.
    pub fn trim_leading_padding(self) -> Self {
        let lead = (0..self.batch)
            .map(|b| self.valid[b * self.seq..(b + 1) * self.seq].iter().take_while(|&&v| !v).count())
            .min()
            .unwrap_or(0);
        if lead == 0 {
            return self;
        }
        let seq = self.seq - lead;
        let keep = |v: &[u32]| -> Vec<u32> { v.chunks(self.seq).flat_map(|r| r[lead..].iter().copied()).collect() };
        let ids = keep(&self.ids);
        let valid = self.valid.chunks(self.seq).flat_map(|r| r[lead..].iter().copied()).collect();
        let cls_pos = self.cls_pos.iter().map(|p| p - lead).collect();
        Self { ids, valid, batch: self.batch, seq, cls_pos }
    }

    /// Flattened row index of every `[CLS]` position.
    pub fn cls_rows(&self) -> Vec<usize> {
        self.cls_pos.iter().enumerate().map(|(b, &p)| b * self.seq + p).collect()
    }
}

/// Final-normed states of one exit.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitState<T> {
    /// `(batch·seq, hidden)`
    pub hidden: Array2<T>,
    /// `(batch, hidden)`: rows of `hidden` at each `[CLS]`.
    pub pooled: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitStates<T> {
    pub states: BTreeMap<usize, ExitState<T>>,
}

impl<T> ExitStates<T> {
    pub fn get(&self, exit: usize) -> Result<&ExitState<T>> {
        self.states.get(&exit).ok_or(Error::UnknownExit(exit))
    }

    pub fn exits(&self) -> Vec<usize> {
        self.states.keys().copied().collect()
    }
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    attn: Array2<T>,
    ln2: LnCache<T>,
    bn: Array2<T>,
    u: Array2<T>,
    /// inner tanh of the GELU at `u`
    t: Array2<T>,
    g: Array2<T>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache<T> {
    ids: Vec<u32>,
    valid: Vec<bool>,
    batch: usize,
    seq: usize,
    rows: Vec<Vec<usize>>,
    rope: RopeTable<T>,
    layers: Vec<LayerCache<T>>,
    exit_ln: BTreeMap<usize, LnCache<T>>,
}

struct AttnOut<T> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    attn: Array2<T>,
}

/// Flattened row indices of the valid positions of each batch element.
fn valid_rows(valid: &[bool], batch: usize, seq: usize) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|b| (b * seq..(b + 1) * seq).filter(|&r| valid[r]).collect())
        .collect()
}

/// Exact softmax attention of every query head over its shared key/value
/// head. Only valid positions take part; padded query rows get zero output.
/// Probabilities are kept per (batch element, head) over valid positions.
fn attention_core<T: Scalar>(
    cfg: &EncoderConfig,
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    rows: &[Vec<usize>],
) -> (Array2<T>, Vec<Array2<T>>) {
    let hd = cfg.head_dim();
    let group = cfg.group_size();
    let scale: T = cast(1.0 / (hd as f64).sqrt());
    let mut out = Array2::zeros((q.nrows(), cfg.hidden));
    let mut probs = Vec::with_capacity(rows.len() * cfg.n_heads);
    for idx in rows {
        let (qb, kb, vb) = (q.select(Axis(0), idx), k.select(Axis(0), idx), v.select(Axis(0), idx));
        let mut ob = Array2::zeros((idx.len(), cfg.hidden));
        for h in 0..cfg.n_heads {
            let g = h / group;
            let qh = qb.slice(s![.., h * hd..(h + 1) * hd]);
            let kh = kb.slice(s![.., g * hd..(g + 1) * hd]);
            let vh = vb.slice(s![.., g * hd..(g + 1) * hd]);
            let mut scores = Array2::zeros((idx.len(), idx.len()));
            general_mat_mul(scale, &qh, &kh.t(), T::zero(), &mut scores);
            softmax_rows(&mut scores);
            general_mat_mul(T::one(), &scores, &vh, T::zero(), &mut ob.slice_mut(s![.., h * hd..(h + 1) * hd]));
            probs.push(scores);
        }
        for (&r, row) in idx.iter().zip(ob.outer_iter()) {
            out.row_mut(r).assign(&row);
        }
    }
    (out, probs)
}

fn attention_sublayer<T: Scalar>(
    cfg: &EncoderConfig,
    p: &LayerParams<T>,
    a: &Array2<T>,
    rows: &[Vec<usize>],
    rope: &RopeTable<T>,
) -> AttnOut<T> {
    let hd = cfg.head_dim();
    let mut q = a.dot(&p.wq) + &p.bq;
    let mut k = a.dot(&p.wk) + &p.bk;
    let v = a.dot(&p.wv) + &p.bv;
    rope.apply(&mut q, hd, false);
    rope.apply(&mut k, hd, false);
    let (attn, probs) = attention_core(cfg, &q, &k, &v, rows);
    AttnOut { q, k, v, probs, attn }
}

fn layer_forward<T: Scalar>(
    cfg: &EncoderConfig,
    p: &LayerParams<T>,
    x: &Array2<T>,
    rows: &[Vec<usize>],
    rope: &RopeTable<T>,
) -> (Array2<T>, LayerCache<T>) {
    let (a, ln1) = layer_norm(x, &p.ln1_g, &p.ln1_b);
    let AttnOut { q, k, v, probs, attn } = attention_sublayer(cfg, p, &a, rows, rope);
    let mut x2 = attn.dot(&p.wo) + &p.bo;
    x2 += x;
    let (bn, ln2) = layer_norm(&x2, &p.ln2_g, &p.ln2_b);
    let u = bn.dot(&p.w1) + &p.b1;
    let t = u.mapv(gelu_tanh);
    let half: T = cast(0.5);
    let mut g = u.clone();
    Zip::from(&mut g).and(&t).for_each(|g, &t| *g = half * *g * (T::one() + t));
    let mut x3 = g.dot(&p.w2) + &p.b2;
    x3 += &x2;
    (x3, LayerCache { ln1, a, q, k, v, probs, attn, ln2, bn, u, t, g })
}

fn layer_backward<T: Scalar>(
    cfg: &EncoderConfig,
    p: &LayerParams<T>,
    c: &LayerCache<T>,
    dx3: Array2<T>,
    gr: &mut LayerParams<T>,
    rows: &[Vec<usize>],
    rope: &RopeTable<T>,
) -> Array2<T> {
    let one = T::one();
    let hd = cfg.head_dim();
    let group = cfg.group_size();
    let scale: T = cast(1.0 / (hd as f64).sqrt());

    // MLP
    general_mat_mul(one, &c.g.t(), &dx3, one, &mut gr.w2);
    gr.b2 += &dx3.sum_axis(Axis(0));
    let mut du = dx3.dot(&p.w2.t());
    Zip::from(&mut du).and(&c.u).and(&c.t).for_each(|d, &u, &t| *d *= gelu_grad_from(u, t));
    general_mat_mul(one, &c.bn.t(), &du, one, &mut gr.w1);
    gr.b1 += &du.sum_axis(Axis(0));
    let dbn = du.dot(&p.w1.t());
    let mut dx2 = layer_norm_backward(&dbn, &c.ln2, &p.ln2_g, &mut gr.ln2_g, &mut gr.ln2_b);
    dx2 += &dx3;

    // attention output projection
    general_mat_mul(one, &c.attn.t(), &dx2, one, &mut gr.wo);
    gr.bo += &dx2.sum_axis(Axis(0));
    let dattn = dx2.dot(&p.wo.t());

    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for (b, idx) in rows.iter().enumerate() {
        let (qb, kb, vb) = (c.q.select(Axis(0), idx), c.k.select(Axis(0), idx), c.v.select(Axis(0), idx));
        let db_out = dattn.select(Axis(0), idx);
        let mut dqb = Array2::<T>::zeros(qb.dim());
        let mut dkb = Array2::<T>::zeros(kb.dim());
        let mut dvb = Array2::<T>::zeros(vb.dim());
        for h in 0..cfg.n_heads {
            let g = h / group;
            let probs = &c.probs[b * cfg.n_heads + h];
            let d_out = db_out.slice(s![.., h * hd..(h + 1) * hd]);
            let qh = qb.slice(s![.., h * hd..(h + 1) * hd]);
            let kh = kb.slice(s![.., g * hd..(g + 1) * hd]);
            let vh = vb.slice(s![.., g * hd..(g + 1) * hd]);
            let mut ds = d_out.dot(&vh.t());
            general_mat_mul(one, &probs.t(), &d_out, one, &mut dvb.slice_mut(s![.., g * hd..(g + 1) * hd]));
            for (mut drow, prow) in ds.outer_iter_mut().zip(probs.outer_iter()) {
                let dot = drow.iter().zip(prow.iter()).map(|(&d, &p)| d * p).sum::<T>();
                Zip::from(&mut drow).and(&prow).for_each(|d, &p| *d = p * (*d - dot) * scale);
            }
            general_mat_mul(one, &ds, &kh, T::zero(), &mut dqb.slice_mut(s![.., h * hd..(h + 1) * hd]));
            general_mat_mul(one, &ds.t(), &qh, one, &mut dkb.slice_mut(s![.., g * hd..(g + 1) * hd]));
        }
        for (i, &r) in idx.iter().enumerate() {
            dq.row_mut(r).assign(&dqb.row(i));
            dk.row_mut(r).assign(&dkb.row(i));
            dv.row_mut(r).assign(&dvb.row(i));
        }
    }
    rope.apply(&mut dq, hd, true);
    rope.apply(&mut dk, hd, true);
    general_mat_mul(one, &c.a.t(), &dq, one, &mut gr.wq);
    general_mat_mul(one, &c.a.t(), &dk, one, &mut gr.wk);
    general_mat_mul(one, &c.a.t(), &dv, one, &mut gr.wv);
    gr.bq += &dq.sum_axis(Axis(0));
    gr.bk += &dk.sum_axis(Axis(0));
    gr.bv += &dv.sum_axis(Axis(0));
    let mut da = dq.dot(&p.wq.t());
    general_mat_mul(one, &dk, &p.wk.t(), one, &mut da);
    general_mat_mul(one, &dv, &p.wv.t(), one, &mut da);
    let mut dx = layer_norm_backward(&da, &c.ln1, &p.ln1_g, &mut gr.ln1_g, &mut gr.ln1_b);
    dx += &dx2;
    dx
}

fn check_inputs<T: Scalar>(ckpt: &Checkpoint<T>, batch: &TokenBatch, up_to: usize) -> Result<()> {
    let cfg = &ckpt.config;
    cfg.exit_slot(up_to)?;
    if batch.seq > cfg.max_seq {
        return Err(Error::invalid(format!("sequence length {} > max_seq {}", batch.seq, cfg.max_seq)));
    }
    if batch.ids.len() != batch.n_rows() || batch.valid.len() != batch.n_rows() {
        return Err(Error::invalid("batch buffers do not match batch × seq"));
    }
    if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { id, size: cfg.vocab_size });
    }
    Ok(())
}

/// Runs layers `1..=up_to` and records final-normed states at every exit
/// not deeper than `up_to`.
pub fn forward_batch<T: Scalar>(
    ckpt: &Checkpoint<T>,
    batch: &TokenBatch,
    up_to: usize,
) -> Result<(ExitStates<T>, ForwardCache<T>)> {
    check_inputs(ckpt, batch, up_to)?;
    let cfg = &ckpt.config;
    let p = &ckpt.params;
    let rope = RopeTable::new(0..batch.seq, cfg.head_dim(), cfg.rope_theta);
    let mut x = Array2::zeros((batch.n_rows(), cfg.hidden));
    for (mut row, &id) in x.outer_iter_mut().zip(&batch.ids) {
        row.assign(&p.tok_emb.row(id as usize));
    }
    let cls_rows = batch.cls_rows();
    let rows = valid_rows(&batch.valid, batch.batch, batch.seq);
    let mut layers = Vec::with_capacity(up_to);
    let mut states = BTreeMap::new();
    let mut exit_ln = BTreeMap::new();
    for l in 1..=up_to {
        let (next, cache) = layer_forward(cfg, &p.layers[l - 1], &x, &rows, &rope);
        x = next;
        layers.push(cache);
        if cfg.exits.contains(&l) {
            let (hidden, ln) = layer_norm(&x, &p.final_g, &p.final_b);
            let pooled = hidden.select(Axis(0), &cls_rows);
            states.insert(l, ExitState { hidden, pooled });
            exit_ln.insert(l, ln);
        }
    }
    let cache = ForwardCache {
        ids: batch.ids.clone(),
        valid: batch.valid.clone(),
        batch: batch.batch,
        seq: batch.seq,
        rows,
        rope,
        layers,
        exit_ln,
    };
    Ok((ExitStates { states }, cache))
}

/// Single-sequence forward pass.
pub fn forward<T: Scalar>(
    ckpt: &Checkpoint<T>,
    ids: &[u32],
    valid_mask: &[bool],
    up_to_exit: usize,
) -> Result<ExitStates<T>> {
    let batch = TokenBatch::single(ids, valid_mask)?;
    Ok(forward_batch(ckpt, &batch, up_to_exit)?.0)
}

impl<T: Scalar> ForwardCache<T> {
    /// Accumulates into `grads` the gradient implied by `exit_grads`, the
    /// loss gradient w.r.t. each exit's final-normed hidden states.
    pub fn backward(
        &self,
        ckpt: &Checkpoint<T>,
        exit_grads: &BTreeMap<usize, Array2<T>>,
        grads: &mut Params<T>,
    ) -> Result<()> {
        let cfg = &ckpt.config;
        let p = &ckpt.params;
        let Some(&top) = exit_grads.keys().next_back() else {
            return Ok(());
        };
        for e in exit_grads.keys() {
            if !self.exit_ln.contains_key(e) {
                return Err(Error::UnknownExit(*e));
            }
        }
        let mut dx: Array2<T> = Array2::zeros((self.batch * self.seq, cfg.hidden));
        for l in (1..=top).rev() {
            if let Some(dh) = exit_grads.get(&l) {
                dx += &layer_norm_backward(
                    dh,
                    &self.exit_ln[&l],
                    &p.final_g,
                    &mut grads.final_g,
                    &mut grads.final_b,
                );
            }
            dx = layer_backward(
                cfg,
                &p.layers[l - 1],
                &self.layers[l - 1],
                dx,
                &mut grads.layers[l - 1],
                &self.rows,
                &self.rope,
            );
        }
        for (row, &id) in dx.outer_iter().zip(&self.ids) {
            let mut dst = grads.tok_emb.row_mut(id as usize);
            dst += &row;
        }
        Ok(())
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Attention probabilities of layer `layer` (1-based), one `(seq, seq)`
    /// matrix per (batch element, query head). Rows and columns of padded
    /// positions are zero.
    pub fn attention_probs(&self, layer: usize) -> Option<Vec<Array2<T>>> {
        let c = self.layers.get(layer.checked_sub(1)?)?;
        let heads = c.probs.len() / self.batch.max(1);
        Some(
            c.probs
                .iter()
                .enumerate()
                .map(|(i, p)| expand_probs(p, &self.rows[i / heads], (i / heads) * self.seq, self.seq))
                .collect(),
        )
    }
}

fn expand_probs<T: Scalar>(p: &Array2<T>, idx: &[usize], base: usize, seq: usize) -> Array2<T> {
    let mut full = Array2::zeros((seq, seq));
    for (i, &r) in idx.iter().enumerate() {
        for (j, &c) in idx.iter().enumerate() {
            full[[r - base, c - base]] = p[[i, j]];
        }
    }
    full
}

/// Attention sublayer of one block applied to already-normalized states of
/// a single sequence (projections, rotary encoding, attention, output map).
pub fn gqa_attention<T: Scalar>(
    cfg: &EncoderConfig,
    layer: &LayerParams<T>,
    hidden: ArrayView2<T>,
    valid_mask: &[bool],
) -> Array2<T> {
    let seq = hidden.nrows();
    let rope = RopeTable::new(0..seq, cfg.head_dim(), cfg.rope_theta);
    let rows = valid_rows(valid_mask, 1, seq);
    let out = attention_sublayer(cfg, layer, &hidden.to_owned(), &rows, &rope);
    out.attn.dot(&layer.wo) + &layer.bo
}

/// Per-head `(seq, seq)` attention probabilities of [`gqa_attention`].
pub fn gqa_attention_probs<T: Scalar>(
    cfg: &EncoderConfig,
    layer: &LayerParams<T>,
    hidden: ArrayView2<T>,
    valid_mask: &[bool],
) -> Vec<Array2<T>> {
    let seq = hidden.nrows();
    let rope = RopeTable::new(0..seq, cfg.head_dim(), cfg.rope_theta);
    let rows = valid_rows(valid_mask, 1, seq);
    let out = attention_sublayer(cfg, layer, &hidden.to_owned(), &rows, &rope);
    out.probs.iter().map(|p| expand_probs(p, &rows[0], 0, seq)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitOptions;
    use rand::Rng;

    fn ckpt(cfg: EncoderConfig, seed: u64) -> Checkpoint<f64> {
        Checkpoint::init(cfg, seed).unwrap()
    }

    fn random_input(vocab: usize, len: usize, pad: usize, seed: u64) -> (Vec<u32>, Vec<bool>) {
        let mut rng = crate::seeded_rng(seed);
        let ids = (0..len).map(|i| if i < pad { 0 } else { rng.random_range(5..vocab as u32) }).collect();
        let valid = (0..len).map(|i| i >= pad).collect();
        (ids, valid)
    }

    #[test]
    fn shallowest_exit_has_one_state() {
        let c = ckpt(EncoderConfig::tiny(16), 1);
        let (ids, valid) = random_input(16, 10, 2, 1);
        let st = forward(&c, &ids, &valid, 1).unwrap();
        assert_eq!(st.exits(), vec![1]);
        assert_eq!(st.get(1).unwrap().pooled.row(0), st.get(1).unwrap().hidden.row(9));
        assert!(matches!(forward(&c, &ids, &valid, 3), Err(Error::UnknownExit(3))));
    }

    #[test]
    fn early_exit_is_a_prefix_of_full_forward() {
        let mut cfg = EncoderConfig::desk(40);
        cfg.hidden = 16;
        cfg.intermediate = 32;
        cfg.max_seq = 24;
        let c = ckpt(cfg.clone(), 3);
        let (ids, valid) = random_input(40, 20, 5, 2);
        let full = forward(&c, &ids, &valid, 8).unwrap();
        for &e in &cfg.exits {
            let part = forward(&c, &ids, &valid, e).unwrap();
            let d = (&part.get(e).unwrap().hidden - &full.get(e).unwrap().hidden)
                .iter()
                .fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(d <= 1e-12, "exit {e}: {d}");
        }
    }

    #[test]
    fn attention_is_bidirectional() {
        let c = ckpt(EncoderConfig::tiny(16), 4);
        let (mut ids, valid) = random_input(16, 12, 3, 3);
        let a = forward(&c, &ids, &valid, 1).unwrap();
        ids[10] = if ids[10] == 5 { 6 } else { 5 };
        let b = forward(&c, &ids, &valid, 1).unwrap();
        let diff = (&a.get(1).unwrap().hidden.row(3) - &b.get(1).unwrap().hidden.row(3))
            .iter()
            .map(|x| x * x)
            .sum::<f64>();
        assert!(diff > 0.0);
    }

    #[test]
    fn padding_tokens_are_invisible() {
        let c = ckpt(EncoderConfig::tiny(16), 5);
        let (mut ids, valid) = random_input(16, 12, 4, 4);
        let a = forward(&c, &ids, &valid, 2).unwrap();
        ids[0] = 9;
        ids[2] = 13;
        let b = forward(&c, &ids, &valid, 2).unwrap();
        for e in [1, 2] {
            let ha = a.get(e).unwrap().hidden.slice(s![4.., ..]).to_owned();
            let hb = b.get(e).unwrap().hidden.slice(s![4.., ..]).to_owned();
            assert_eq!(ha, hb);
        }
    }

    #[test]
    fn batch_elements_do_not_interact() {
        let c = ckpt(EncoderConfig::tiny(16), 6);
        let x = random_input(16, 10, 2, 7);
        let y = random_input(16, 10, 0, 8);
        let mk = |a: &(Vec<u32>, Vec<bool>), b: &(Vec<u32>, Vec<bool>)| TokenBatch {
            ids: [a.0.clone(), b.0.clone()].concat(),
            valid: [a.1.clone(), b.1.clone()].concat(),
            batch: 2,
            seq: 10,
            cls_pos: vec![9, 9],
        };
        let (xy, _) = forward_batch(&c, &mk(&x, &y), 2).unwrap();
        let (yx, _) = forward_batch(&c, &mk(&y, &x), 2).unwrap();
        let (p, q) = (&xy.get(2).unwrap().pooled, &yx.get(2).unwrap().pooled);
        assert!((&p.row(0) - &q.row(1)).iter().all(|d| d.abs() < 1e-12));
        assert!((&p.row(1) - &q.row(0)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn degenerate_gqa_matches_multi_head() {
        let mut cfg = EncoderConfig::tiny(16);
        cfg.n_kv_heads = cfg.n_heads;
        let c = Checkpoint::<f64>::init_with(cfg.clone(), 2, InitOptions::default()).unwrap();
        let mut rng = crate::seeded_rng(9);
        let hidden = Array2::from_shape_fn((6, cfg.hidden), |_| rng.random_range(-1.0..1.0));
        let valid = vec![false, true, true, true, true, true];
        let out = gqa_attention(&cfg, &c.params.layers[0], hidden.view(), &valid);

        // Reference multi-head attention written without grouping.
        let l = &c.params.layers[0];
        let hd = cfg.head_dim();
        let mut q = hidden.dot(&l.wq) + &l.bq;
        let mut k = hidden.dot(&l.wk) + &l.bk;
        let v = hidden.dot(&l.wv) + &l.bv;
        let pos: Vec<usize> = (0..6).collect();
        for h in 0..cfg.n_heads {
            let rq = crate::model::rope_rotate(q.slice(s![.., h * hd..(h + 1) * hd]), &pos, cfg.rope_theta).unwrap();
            q.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&rq);
            let rk = crate::model::rope_rotate(k.slice(s![.., h * hd..(h + 1) * hd]), &pos, cfg.rope_theta).unwrap();
            k.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&rk);
        }
        let mut concat = Array2::<f64>::zeros((6, cfg.hidden));
        for h in 0..cfg.n_heads {
            for i in 0..6 {
                let logits: Vec<f64> = (0..6)
                    .map(|j| {
                        if !valid[j] {
                            return f64::NEG_INFINITY;
                        }
                        (0..hd).map(|d| q[[i, h * hd + d]] * k[[j, h * hd + d]]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
                for j in 0..6 {
                    let w = (logits[j] - m).exp() / z;
                    for d in 0..hd {
                        concat[[i, h * hd + d]] += w * v[[j, h * hd + d]];
                    }
                }
            }
        }
        let reference = concat.dot(&l.wo) + &l.bo;
        let d = &out.slice(s![1.., ..]) - &reference.slice(s![1.., ..]);
        assert!(d.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn single_valid_token_attends_to_itself() {
        let cfg = EncoderConfig::tiny(16);
        let c = ckpt(cfg.clone(), 3);
        let l = &c.params.layers[0];
        let mut rng = crate::seeded_rng(1);
        let hidden = Array2::from_shape_fn((4, cfg.hidden), |_| rng.random_range(-1.0..1.0));
        let valid = vec![false, false, false, true];
        let out = gqa_attention(&cfg, l, hidden.view(), &valid);
        // value projection of the one valid token, per kv head, through wo
        let v = hidden.row(3).dot(&l.wv) + &l.bv;
        let hd = cfg.head_dim();
        let mut concat = ndarray::Array1::<f64>::zeros(cfg.hidden);
        for h in 0..cfg.n_heads {
            let g = h / cfg.group_size();
            concat.slice_mut(s![h * hd..(h + 1) * hd]).assign(&v.slice(s![g * hd..(g + 1) * hd]));
        }
        let expect = concat.dot(&l.wo) + &l.bo;
        assert!((&out.row(3) - &expect).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn trimming_shared_padding_keeps_states() {
        let c = ckpt(EncoderConfig::tiny(16), 6);
        let (a_ids, a_valid) = random_input(16, 12, 5, 1);
        let (b_ids, b_valid) = random_input(16, 12, 3, 2);
        let full = TokenBatch {
            ids: [a_ids, b_ids].concat(),
            valid: [a_valid, b_valid].concat(),
            batch: 2,
            seq: 12,
            cls_pos: vec![11, 11],
        };
        let trimmed = full.clone().trim_leading_padding();
        assert_eq!((trimmed.seq, trimmed.cls_pos.clone()), (9, vec![8, 8]));
        let (x, _) = forward_batch(&c, &full, 2).unwrap();
        let (y, _) = forward_batch(&c, &trimmed, 2).unwrap();
        let d = &x.get(2).unwrap().pooled - &y.get(2).unwrap().pooled;
        assert!(d.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = EncoderConfig::tiny(16);
        let c = ckpt(cfg.clone(), 3);
        let mut rng = crate::seeded_rng(2);
        let hidden = Array2::from_shape_fn((7, cfg.hidden), |_| rng.random_range(-1.0..1.0));
        let valid = vec![false, false, true, true, true, true, true];
        for p in gqa_attention_probs(&cfg, &c.params.layers[1], hidden.view(), &valid) {
            for (i, row) in p.outer_iter().enumerate() {
                let expect = if valid[i] { 1.0 } else { 0.0 };
                assert!((row.sum() - expect).abs() < 1e-6);
                assert_eq!(row[0] + row[1], 0.0);
            }
        }
    }
}
