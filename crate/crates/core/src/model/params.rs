use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{cast, EncoderConfig, Scalar};
use crate::{seeded_rng, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"MSKCKPT\0";

/// Weights of one pre-norm block. Linear maps are stored `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tok_emb: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_g: Array1<T>,
    pub final_b: Array1<T>,
    /// One learned vector per exit, added before the shared heads.
    pub exit_emb: Array2<T>,
    pub mlm_w: Array2<T>,
    pub mlm_b: Array1<T>,
    pub icc_w: Array1<T>,
    pub icc_b: Array1<T>,
    /// Per-exit retrieval projections `(hidden, proj_dim)`.
    pub proj: Vec<Array2<T>>,
    /// Row `i` is the clone classifier of exit slot `i`.
    pub clone_w: Array2<T>,
    pub clone_b: Array1<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitOptions {
    pub zero_exit_embedding: bool,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(c: &EncoderConfig) -> Self {
        let (h, kv, i) = (c.hidden, c.kv_dim(), c.intermediate);
        Self {
            ln1_g: Array1::ones(h),
            ln1_b: Array1::zeros(h),
            wq: Array2::zeros((h, h)),
            bq: Array1::zeros(h),
            wk: Array2::zeros((h, kv)),
            bk: Array1::zeros(kv),
            wv: Array2::zeros((h, kv)),
            bv: Array1::zeros(kv),
            wo: Array2::zeros((h, h)),
            bo: Array1::zeros(h),
            ln2_g: Array1::ones(h),
            ln2_b: Array1::zeros(h),
            w1: Array2::zeros((h, i)),
            b1: Array1::zeros(i),
            w2: Array2::zeros((i, h)),
            b2: Array1::zeros(h),
        }
    }
}

impl<T: Scalar> Params<T> {
    /// Shapes per config, gains one, everything else zero.
    pub fn zeros(c: &EncoderConfig) -> Self {
        let h = c.hidden;
        let n_exit = c.exits.len();
        Self {
            tok_emb: Array2::zeros((c.vocab_size, h)),
            layers: (0..c.depth).map(|_| LayerParams::zeros(c)).collect(),
            final_g: Array1::ones(h),
            final_b: Array1::zeros(h),
            exit_emb: Array2::zeros((n_exit, h)),
            mlm_w: Array2::zeros((h, c.vocab_size)),
            mlm_b: Array1::zeros(c.vocab_size),
            icc_w: Array1::zeros(h),
            icc_b: Array1::zeros(1),
            proj: (0..n_exit).map(|_| Array2::zeros((h, c.proj_dim))).collect(),
            clone_w: Array2::zeros((n_exit, h)),
            clone_b: Array1::zeros(n_exit),
        }
    }

    /// Same shapes, every element zero (gradient / optimizer-moment buffers).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    /// Scaled-normal initialization: matrices `N(0, 1/fan_in)`, residual
    /// output maps further scaled by `1/sqrt(2·depth)`, exit embeddings
    /// `N(0, 0.02²)`.
    pub fn init(c: &EncoderConfig, seed: u64, opts: InitOptions) -> Result<Self> {
        c.validate()?;
        let mut rng = seeded_rng(seed);
        let mut p = Self::zeros(c);
        let mut fill = |m: &mut [T], std: f64| {
            for v in m.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = cast(z * std);
            }
        };
        let h = c.hidden as f64;
        let resid = 1.0 / (2.0 * c.depth as f64).sqrt();
        fill(p.tok_emb.as_slice_mut().unwrap(), 1.0 / h.sqrt());
        for l in &mut p.layers {
            fill(l.wq.as_slice_mut().unwrap(), 1.0 / h.sqrt());
            fill(l.wk.as_slice_mut().unwrap(), 1.0 / h.sqrt());
            fill(l.wv.as_slice_mut().unwrap(), 1.0 / h.sqrt());
            fill(l.wo.as_slice_mut().unwrap(), resid / h.sqrt());
            fill(l.w1.as_slice_mut().unwrap(), 1.0 / h.sqrt());
            fill(l.w2.as_slice_mut().unwrap(), resid / (c.intermediate as f64).sqrt());
        }
        if !opts.zero_exit_embedding {
            fill(p.exit_emb.as_slice_mut().unwrap(), 0.02);
        }
        fill(p.mlm_w.as_slice_mut().unwrap(), 1.0 / h.sqrt());
        fill(p.icc_w.as_slice_mut().unwrap(), 1.0 / h.sqrt());
        for m in &mut p.proj {
            fill(m.as_slice_mut().unwrap(), 1.0 / h.sqrt());
        }
        fill(p.clone_w.as_slice_mut().unwrap(), 1.0 / h.sqrt());
        Ok(p)
    }

    /// Every tensor in declared (file) order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        fn s<T>(a: &Array2<T>) -> &[T] {
            a.as_slice().expect("standard layout")
        }
        fn v<T>(a: &Array1<T>) -> &[T] {
            a.as_slice().expect("standard layout")
        }
        let mut out: Vec<(String, &[T])> = vec![("tok_emb".into(), s(&self.tok_emb))];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1_g"), v(&l.ln1_g)));
            out.push((format!("layers.{i}.ln1_b"), v(&l.ln1_b)));
            out.push((format!("layers.{i}.wq"), s(&l.wq)));
            out.push((format!("layers.{i}.bq"), v(&l.bq)));
            out.push((format!("layers.{i}.wk"), s(&l.wk)));
            out.push((format!("layers.{i}.bk"), v(&l.bk)));
            out.push((format!("layers.{i}.wv"), s(&l.wv)));
            out.push((format!("layers.{i}.bv"), v(&l.bv)));
            out.push((format!("layers.{i}.wo"), s(&l.wo)));
            out.push((format!("layers.{i}.bo"), v(&l.bo)));
            out.push((format!("layers.{i}.ln2_g"), v(&l.ln2_g)));
            out.push((format!("layers.{i}.ln2_b"), v(&l.ln2_b)));
            out.push((format!("layers.{i}.w1"), s(&l.w1)));
            out.push((format!("layers.{i}.b1"), v(&l.b1)));
            out.push((format!("layers.{i}.w2"), s(&l.w2)));
            out.push((format!("layers.{i}.b2"), v(&l.b2)));
        }
        out.push(("final_g".into(), v(&self.final_g)));
        out.push(("final_b".into(), v(&self.final_b)));
        out.push(("exit_emb".into(), s(&self.exit_emb)));
        out.push(("mlm_w".into(), s(&self.mlm_w)));
        out.push(("mlm_b".into(), v(&self.mlm_b)));
        out.push(("icc_w".into(), v(&self.icc_w)));
        out.push(("icc_b".into(), v(&self.icc_b)));
        for (i, m) in self.proj.iter().enumerate() {
            out.push((format!("proj.{i}"), s(m)));
        }
        out.push(("clone_w".into(), s(&self.clone_w)));
        out.push(("clone_b".into(), v(&self.clone_b)));
        out
    }

    /// Mutable counterpart of [`Params::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        fn s<T>(a: &mut Array2<T>) -> &mut [T] {
            a.as_slice_mut().expect("standard layout")
        }
        fn v<T>(a: &mut Array1<T>) -> &mut [T] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out: Vec<(String, &mut [T])> = vec![("tok_emb".into(), s(&mut self.tok_emb))];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.ln1_g"), v(&mut l.ln1_g)));
            out.push((format!("layers.{i}.ln1_b"), v(&mut l.ln1_b)));
            out.push((format!("layers.{i}.wq"), s(&mut l.wq)));
            out.push((format!("layers.{i}.bq"), v(&mut l.bq)));
            out.push((format!("layers.{i}.wk"), s(&mut l.wk)));
            out.push((format!("layers.{i}.bk"), v(&mut l.bk)));
            out.push((format!("layers.{i}.wv"), s(&mut l.wv)));
            out.push((format!("layers.{i}.bv"), v(&mut l.bv)));
            out.push((format!("layers.{i}.wo"), s(&mut l.wo)));
            out.push((format!("layers.{i}.bo"), v(&mut l.bo)));
            out.push((format!("layers.{i}.ln2_g"), v(&mut l.ln2_g)));
            out.push((format!("layers.{i}.ln2_b"), v(&mut l.ln2_b)));
            out.push((format!("layers.{i}.w1"), s(&mut l.w1)));
            out.push((format!("layers.{i}.b1"), v(&mut l.b1)));
            out.push((format!("layers.{i}.w2"), s(&mut l.w2)));
            out.push((format!("layers.{i}.b2"), v(&mut l.b2)));
        }
        out.push(("final_g".into(), v(&mut self.final_g)));
        out.push(("final_b".into(), v(&mut self.final_b)));
        out.push(("exit_emb".into(), s(&mut self.exit_emb)));
        out.push(("mlm_w".into(), s(&mut self.mlm_w)));
        out.push(("mlm_b".into(), v(&mut self.mlm_b)));
        out.push(("icc_w".into(), v(&mut self.icc_w)));
        out.push(("icc_b".into(), v(&mut self.icc_b)));
        for (i, m) in self.proj.iter_mut().enumerate() {
            out.push((format!("proj.{i}"), s(m)));
        }
        out.push(("clone_w".into(), s(&mut self.clone_w)));
        out.push(("clone_b".into(), v(&mut self.clone_b)));
        out
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![self.tok_emb.shape().to_vec()];
        for l in &self.layers {
            for sh in [
                l.ln1_g.shape(),
                l.ln1_b.shape(),
                l.wq.shape(),
                l.bq.shape(),
                l.wk.shape(),
                l.bk.shape(),
                l.wv.shape(),
                l.bv.shape(),
                l.wo.shape(),
                l.bo.shape(),
                l.ln2_g.shape(),
                l.ln2_b.shape(),
                l.w1.shape(),
                l.b1.shape(),
                l.w2.shape(),
                l.b2.shape(),
            ] {
                out.push(sh.to_vec());
            }
        }
        out.push(self.final_g.shape().to_vec());
        out.push(self.final_b.shape().to_vec());
        out.push(self.exit_emb.shape().to_vec());
        out.push(self.mlm_w.shape().to_vec());
        out.push(self.mlm_b.shape().to_vec());
        out.push(self.icc_w.shape().to_vec());
        out.push(self.icc_b.shape().to_vec());
        for m in &self.proj {
            out.push(m.shape().to_vec());
        }
        out.push(self.clone_w.shape().to_vec());
        out.push(self.clone_b.shape().to_vec());
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| {
                let x = x.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Converts to another element type.
    pub fn cast<U: Scalar>(&self, c: &EncoderConfig) -> Params<U> {
        let mut out = Params::<U>::zeros(c);
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from_f64(s.to_f64().unwrap()).unwrap();
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: EncoderConfig,
    step: u64,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

/// Configuration, learned parameters and training-step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: EncoderConfig,
    pub params: Params<T>,
    pub step: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, seed, InitOptions::default())
    }

    pub fn init_with(config: EncoderConfig, seed: u64, opts: InitOptions) -> Result<Self> {
        let params = Params::init(&config, seed, opts)?;
        Ok(Self { config, params, step: 0 })
    }

    /// File layout: 8-byte magic, u32 version, u64 header length, JSON header
    /// (config, step, dtype, tensor names and shapes), then the tensors as raw
    /// little-endian floats in header order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.params.tensors();
        let shapes = self.params.shapes();
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            dtype: T::DTYPE.to_string(),
            tensors: tensors
                .iter()
                .zip(&shapes)
                .map(|((name, _), shape)| TensorEntry { name: name.clone(), shape: shape.clone() })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::new();
        for (_, t) in tensors {
            buf.clear();
            for &x in t {
                x.write_le(&mut buf);
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut header = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.dtype != T::DTYPE {
            return Err(bad(format!("dtype {} but {} requested", header.dtype, T::DTYPE)));
        }
        header.config.validate()?;
        let mut params = Params::<T>::zeros(&header.config);
        let shapes = params.shapes();
        let mut buf = Vec::new();
        for (((name, t), shape), entry) in
            params.tensors_mut().into_iter().zip(shapes).zip(&header.tensors)
        {
            if entry.name != name || entry.shape != shape {
                return Err(bad(format!("tensor {} does not match expected {name}", entry.name)));
            }
            buf.resize(t.len() * T::BYTES, 0);
            r.read_exact(&mut buf)?;
            for (x, chunk) in t.iter_mut().zip(buf.chunks_exact(T::BYTES)) {
                *x = T::read_le(chunk);
            }
        }
        Ok(Self { config: header.config, params, step: header.step })
    }

    /// Reads only the element type recorded in a checkpoint header.
    pub fn peek_dtype(path: &Path) -> Result<String> {
        let mut r = BufReader::new(File::open(path)?);
        let mut skip = [0u8; 12];
        r.read_exact(&mut skip)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut header = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        Ok(header.dtype)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listing_orders_agree() {
        let c = EncoderConfig::tiny(16);
        let mut p = Params::<f64>::init(&c, 1, InitOptions::default()).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let lens: Vec<usize> = p.tensors().iter().map(|(_, t)| t.len()).collect();
        let shapes = p.shapes();
        let names_mut: Vec<String> = p.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        for (l, s) in lens.iter().zip(&shapes) {
            assert_eq!(*l, s.iter().product::<usize>());
        }
        assert_eq!(p.n_params(), c.n_params());
    }

    #[test]
    fn init_is_deterministic() {
        let c = EncoderConfig::tiny(16);
        let a = Checkpoint::<f32>::init(c.clone(), 9).unwrap();
        assert_eq!(a, Checkpoint::<f32>::init(c.clone(), 9).unwrap());
        assert_ne!(a, Checkpoint::<f32>::init(c.clone(), 10).unwrap());
        let z = Checkpoint::<f32>::init_with(c, 9, InitOptions { zero_exit_embedding: true }).unwrap();
        assert!(z.params.exit_emb.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = EncoderConfig::full_scale(100);
        c.exits = vec![40];
        assert!(matches!(Checkpoint::<f32>::init(c, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn save_load_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ck = Checkpoint::<f32>::init(EncoderConfig::tiny(20), 5).unwrap();
        ck.step = 42;
        ck.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in back.params.tensors().iter().zip(ck.params.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(Checkpoint::<f32>::peek_dtype(&path).unwrap(), "f32");
        assert!(Checkpoint::<f64>::load(&path).is_err());
    }
}
