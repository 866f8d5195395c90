use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::{cast, Scalar};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

/// Row-wise layer normalization.
pub(crate) fn layer_norm<T: Scalar>(
    x: &Array2<T>,
    gain: &Array1<T>,
    bias: &Array1<T>,
) -> (Array2<T>, LnCache<T>) {
    let (n, h) = x.dim();
    let hf: T = cast(h as f64);
    let eps: T = cast(LN_EPS);
    let mut xhat = Array2::zeros((n, h));
    let mut rstd = Array1::zeros(n);
    for ((row, mut out), r) in x.outer_iter().zip(xhat.outer_iter_mut()).zip(rstd.iter_mut()) {
        let mean = row.sum() / hf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hf;
        let s = T::one() / (var + eps).sqrt();
        *r = s;
        Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * s);
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    gain: &Array1<T>,
    dgain: &mut Array1<T>,
    dbias: &mut Array1<T>,
) -> Array2<T> {
    let h = dy.ncols();
    let hf: T = cast(h as f64);
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let mut dx = Array2::zeros(dy.dim());
    for (((mut out, dxh), xh), &s) in dx
        .outer_iter_mut()
        .zip(dxhat.outer_iter())
        .zip(cache.xhat.outer_iter())
        .zip(cache.rstd.iter())
    {
        let m1 = dxh.sum() / hf;
        let m2 = dxh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / hf;
        Zip::from(&mut out)
            .and(&dxh)
            .and(&xh)
            .for_each(|o, &d, &x| *o = s * (d - m1 - x * m2));
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// `tanh` through one `exp`; noticeably cheaper than the libm routine.
#[inline]
pub(crate) fn fast_tanh<T: Scalar>(x: T) -> T {
    let two: T = cast(2.0);
    let lim: T = cast(20.0);
    if x > lim {
        return T::one();
    }
    if x < -lim {
        return -T::one();
    }
    let e = (two * x).fast_exp();
    (e - T::one()) / (e + T::one())
}

/// Inner tanh of the approximation, shared by value and gradient.
#[inline]
pub(crate) fn gelu_tanh<T: Scalar>(x: T) -> T {
    let k: T = cast(GELU_K);
    let c: T = cast(GELU_C);
    fast_tanh(k * (x + c * x * x * x))
}

/// tanh-approximated GELU.
#[cfg(test)]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half: T = cast(0.5);
    half * x * (T::one() + gelu_tanh(x))
}

/// Derivative of [`gelu`] given `t = gelu_tanh(x)`.
#[inline]
pub(crate) fn gelu_grad_from<T: Scalar>(x: T, t: T) -> T {
    let k: T = cast(GELU_K);
    let c: T = cast(GELU_C);
    let half: T = cast(0.5);
    let three: T = cast(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

#[cfg(test)]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_grad_from(x, gelu_tanh(x))
}

/// cos/sin of `pos · theta^(−2j/d)` for `pos < seq`, `j < d/2`.
pub(crate) struct RopeTable<T> {
    cos: Array2<T>,
    sin: Array2<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(positions: impl Iterator<Item = usize>, head_dim: usize, theta: f64) -> Self {
        let positions: Vec<usize> = positions.collect();
        let half = head_dim / 2;
        let mut cos = Array2::zeros((positions.len(), half));
        let mut sin = Array2::zeros((positions.len(), half));
        for (r, &p) in positions.iter().enumerate() {
            for j in 0..half {
                let freq = theta.powf(-2.0 * j as f64 / head_dim as f64);
                let angle = p as f64 * freq;
                cos[[r, j]] = cast(angle.cos());
                sin[[r, j]] = cast(angle.sin());
            }
        }
        Self { cos, sin }
    }

    /// Rotates interleaved pairs `(2j, 2j+1)` of every head in `m`, whose rows
    /// map onto table rows by `row % table_len`. `inverse` applies the
    /// transpose rotation.
    pub fn apply(&self, m: &mut Array2<T>, head_dim: usize, inverse: bool) {
        let period = self.cos.nrows();
        let half = head_dim / 2;
        let n_heads = m.ncols() / head_dim;
        for (n, mut row) in m.outer_iter_mut().enumerate() {
            let t = n % period;
            for h in 0..n_heads {
                for j in 0..half {
                    let c = self.cos[[t, j]];
                    let s = if inverse { -self.sin[[t, j]] } else { self.sin[[t, j]] };
                    let i0 = h * head_dim + 2 * j;
                    let (x0, x1) = (row[i0], row[i0 + 1]);
                    row[i0] = x0 * c - x1 * s;
                    row[i0 + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Rotary encoding of a `(positions × head_dim)` block.
pub fn rope_rotate<T: Scalar>(block: ArrayView2<T>, positions: &[usize], theta: f64) -> Result<Array2<T>> {
    let d = block.ncols();
    if d % 2 != 0 {
        return Err(Error::invalid(format!("head dimension {d} is odd")));
    }
    if positions.len() != block.nrows() {
        return Err(Error::invalid("one position per row required"));
    }
    let table = RopeTable::new(positions.iter().copied(), d, theta);
    let mut out = block.to_owned();
    // Table rows line up with block rows one-to-one.
    table.apply(&mut out, d, false);
    Ok(out)
}

/// In-place masked softmax over each row; masked columns get probability 0.
pub(crate) fn softmax_rows<T: Scalar>(s: &mut Array2<T>) {
    for mut row in s.outer_iter_mut() {
        let row = row.as_slice_mut().expect("contiguous rows");
        let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).fast_exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub fn l2_normalize<T: Scalar>(v: ArrayView1<T>) -> Result<(Array1<T>, T)> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm == T::zero() || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok((v.mapv(|x| x / norm), norm))
}
