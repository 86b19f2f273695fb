//! Pre-LN Vision Transformer with activation taps at the prunable sites.
//!
//! Weight layouts:
//! - attention projections are stored input-major (`x · W`), so the columns
//!   of `wq`/`wk` are head dimensions, grouped per head;
//! - MLP and patch/classifier weights are stored output-major (`W · x`).
//!
//! The softmax temperature is `1/√head_dim` of the unpruned architecture, so
//! logit compensation folded into `wq`/`wk` is function preserving.

mod cost;
mod io;
mod synth;

pub use cost::{count_flops, count_params, kept_count, preset, KeptWidths, PRESETS};
pub use io::{sidecar_path, ModelFileError, ModelMeta};
pub use synth::{synthesize_model, Redundancy};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Images;
use crate::linalg::{dot, Matrix};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VitError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
}

impl VitConfig {
    pub fn validate(&self) -> Result<(), VitError> {
        let counts = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(VitError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.dim != self.heads * self.head_dim {
            return Err(VitError::InvalidConfig(format!(
                "dim {} != heads {} * head_dim {}",
                self.dim, self.heads, self.head_dim
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(VitError::InvalidConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self { gamma: vec![1.0; dim], beta: vec![0.0; dim] }
    }

    pub fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (x[i] - mean) * inv * self.gamma[i] + self.beta[i];
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            self.apply_row(x.row(r), out.row_mut(r));
        }
        out
    }
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// One transformer block. `qk_dims[h]` is the kept query/key width of head h.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    /// dim × Σ qk_dims
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    /// dim × dim
    pub wv: Matrix,
    pub bv: Vec<f64>,
    /// dim × dim
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2: LayerNorm,
    /// hidden × dim
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// dim × hidden
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub qk_dims: Vec<usize>,
}

impl Block {
    pub fn mlp_hidden(&self) -> usize {
        self.w1.rows()
    }

    /// Column offset of head `h` inside `wq`/`wk`.
    pub fn qk_offset(&self, h: usize) -> usize {
        self.qk_dims[..h].iter().sum()
    }

    /// Query and key columns of one head, as `(W_Q, b_Q, W_K, b_K)`.
    pub fn head_qk(&self, h: usize) -> (Matrix, Vec<f64>, Matrix, Vec<f64>) {
        let off = self.qk_offset(h);
        let w = self.qk_dims[h];
        (
            self.wq.col_range(off, w),
            self.bq[off..off + w].to_vec(),
            self.wk.col_range(off, w),
            self.bk[off..off + w].to_vec(),
        )
    }

    /// Replace the query/key columns of head `h` (the width may change).
    pub fn set_head_qk(&mut self, h: usize, wq: Matrix, bq: Vec<f64>, wk: Matrix, bk: Vec<f64>) {
        let heads = self.qk_dims.len();
        let mut wq_parts = Vec::with_capacity(heads);
        let mut wk_parts = Vec::with_capacity(heads);
        let mut bq_all = Vec::new();
        let mut bk_all = Vec::new();
        for j in 0..heads {
            if j == h {
                wq_parts.push(wq.clone());
                wk_parts.push(wk.clone());
                bq_all.extend_from_slice(&bq);
                bk_all.extend_from_slice(&bk);
            } else {
                let (a, b, c, d) = self.head_qk(j);
                wq_parts.push(a);
                wk_parts.push(c);
                bq_all.extend(b);
                bk_all.extend(d);
            }
        }
        self.qk_dims[h] = wq.cols();
        self.wq = Matrix::hstack(&wq_parts);
        self.wk = Matrix::hstack(&wk_parts);
        self.bq = bq_all;
        self.bk = bk_all;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    pub config: VitConfig,
    /// dim × patch_len
    pub patch_w: Matrix,
    pub patch_b: Vec<f64>,
    pub cls_token: Vec<f64>,
    /// tokens × dim
    pub pos_embed: Matrix,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    /// classes × dim
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

/// Activations captured inside one block for one image.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// tokens × hidden, post-GELU
    pub mlp_hidden: Matrix,
    /// per head, tokens × kept head dim, biases included
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    /// per head, unscaled `Q Kᵀ`
    pub logits: Option<Vec<Matrix>>,
}

#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub blocks: Vec<BlockTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    Off,
    On,
    WithLogits,
}

/// Forward result for one image.
#[derive(Debug, Clone)]
pub struct ImageOutput {
    pub logits: Vec<f64>,
    /// Final-normalized class token.
    pub repr: Vec<f64>,
    pub trace: Option<ActivationTrace>,
}

impl VitModel {
    pub fn kept_widths(&self) -> KeptWidths {
        KeptWidths {
            mlp_hidden: self.blocks.iter().map(Block::mlp_hidden).collect(),
            qk_dims: self.blocks.iter().map(|b| b.qk_dims.clone()).collect(),
            v_dims: self.blocks.iter().map(|_| vec![self.config.head_dim; self.config.heads]).collect(),
        }
    }

    /// Checks every parameter shape against the config and kept widths.
    pub fn validate(&self) -> Result<(), VitError> {
        let c = &self.config;
        c.validate()?;
        let d = c.dim;
        let mismatch = |what: &str| Err(VitError::ShapeMismatch(what.to_string()));
        if self.patch_w.shape() != (d, c.patch_len()) || self.patch_b.len() != d {
            return mismatch("patch embedding");
        }
        if self.cls_token.len() != d || self.pos_embed.shape() != (c.tokens(), d) {
            return mismatch("cls/pos embedding");
        }
        if self.norm.gamma.len() != d || self.norm.beta.len() != d {
            return mismatch("final norm");
        }
        if self.head_w.shape() != (c.num_classes, d) || self.head_b.len() != c.num_classes {
            return mismatch("classifier head");
        }
        if self.blocks.len() != c.depth {
            return mismatch("block count");
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let qk: usize = b.qk_dims.iter().sum();
            let hid = b.w1.rows();
            let ok = b.qk_dims.len() == c.heads
                && b.qk_dims.iter().all(|&w| (1..=c.head_dim).contains(&w))
                && b.wq.shape() == (d, qk)
                && b.wk.shape() == (d, qk)
                && b.bq.len() == qk
                && b.bk.len() == qk
                && b.wv.shape() == (d, d)
                && b.bv.len() == d
                && b.wo.shape() == (d, d)
                && b.bo.len() == d
                && b.ln1.gamma.len() == d
                && b.ln1.beta.len() == d
                && b.ln2.gamma.len() == d
                && b.ln2.beta.len() == d
                && hid >= 1
                && b.w1.shape() == (hid, d)
                && b.b1.len() == hid
                && b.w2.shape() == (d, hid)
                && b.b2.len() == d;
            if !ok {
                return Err(VitError::ShapeMismatch(format!("block {i}")));
            }
        }
        Ok(())
    }

    /// Patch embedding plus class token and positions: tokens × dim.
    pub fn embed(&self, image: &[f32]) -> Matrix {
        let c = &self.config;
        let side = c.image_size / c.patch_size;
        let mut x = Matrix::zeros(c.tokens(), c.dim);
        for j in 0..c.dim {
            x[(0, j)] = self.cls_token[j] + self.pos_embed[(0, j)];
        }
        let mut patch = vec![0.0; c.patch_len()];
        for pi in 0..side {
            for pj in 0..side {
                let mut k = 0;
                for dy in 0..c.patch_size {
                    for dx in 0..c.patch_size {
                        let y = pi * c.patch_size + dy;
                        let xx = pj * c.patch_size + dx;
                        let base = (y * c.image_size + xx) * c.channels;
                        for ch in 0..c.channels {
                            patch[k] = f64::from(image[base + ch]);
                            k += 1;
                        }
                    }
                }
                let t = 1 + pi * side + pj;
                for j in 0..c.dim {
                    x[(t, j)] = dot(self.patch_w.row(j), &patch) + self.patch_b[j] + self.pos_embed[(t, j)];
                }
            }
        }
        x
    }

    /// Attention sub-layer output (before the residual add).
    fn attention(&self, b: &Block, h: &Matrix, trace: Option<&mut BlockTrace>, with_logits: bool) -> Matrix {
        let c = &self.config;
        let q_all = add_bias(&h.matmul(&b.wq), &b.bq);
        let k_all = add_bias(&h.matmul(&b.wk), &b.bk);
        let v_all = add_bias(&h.matmul(&b.wv), &b.bv);
        let scale = 1.0 / (c.head_dim as f64).sqrt();
        let tokens = h.rows();
        let mut concat = Matrix::zeros(tokens, c.dim);
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut ls = Vec::new();
        let mut off = 0;
        for head in 0..c.heads {
            let w = b.qk_dims[head];
            let q = q_all.col_range(off, w);
            let k = k_all.col_range(off, w);
            off += w;
            let logits = q.matmul_t(&k);
            let mut attn = logits.scale(scale);
            for r in 0..tokens {
                softmax_in_place(attn.row_mut(r));
            }
            let v = v_all.col_range(head * c.head_dim, c.head_dim);
            let out = attn.matmul(&v);
            for r in 0..tokens {
                concat.row_mut(r)[head * c.head_dim..(head + 1) * c.head_dim].copy_from_slice(out.row(r));
            }
            if trace.is_some() {
                qs.push(q);
                ks.push(k);
                if with_logits {
                    ls.push(logits);
                }
            }
        }
        if let Some(t) = trace {
            t.q = qs;
            t.k = ks;
            t.logits = with_logits.then_some(ls);
        }
        add_bias(&concat.matmul(&b.wo), &b.bo)
    }

    /// MLP hidden activations (post-GELU): tokens × hidden.
    pub fn mlp_hidden(&self, b: &Block, h: &Matrix) -> Matrix {
        let mut pre = add_bias(&h.matmul_t(&b.w1), &b.b1);
        for v in pre.data_mut() {
            *v = gelu(*v);
        }
        pre
    }

    pub fn forward_image(&self, image: &[f32], mode: TraceMode) -> ImageOutput {
        let mut x = self.embed(image);
        let mut traces = Vec::new();
        for b in &self.blocks {
            let mut bt = BlockTrace { mlp_hidden: Matrix::zeros(0, 0), q: vec![], k: vec![], logits: None };
            let tracing = mode != TraceMode::Off;
            let h = b.ln1.apply(&x);
            let attn = self.attention(b, &h, tracing.then_some(&mut bt), mode == TraceMode::WithLogits);
            x = x.add(&attn);
            let h = b.ln2.apply(&x);
            let act = self.mlp_hidden(b, &h);
            let out = add_bias(&act.matmul_t(&b.w2), &b.b2);
            x = x.add(&out);
            if tracing {
                bt.mlp_hidden = act;
                traces.push(bt);
            }
        }
        let mut repr = vec![0.0; self.config.dim];
        self.norm.apply_row(x.row(0), &mut repr);
        let logits = add_vec(&self.head_w.matvec(&repr), &self.head_b);
        let trace = (mode != TraceMode::Off).then_some(ActivationTrace { blocks: traces });
        ImageOutput { logits, repr, trace }
    }

    pub fn check_images(&self, images: &Images) -> Result<(), VitError> {
        let c = &self.config;
        if images.height != c.image_size || images.width != c.image_size || images.channels != c.channels {
            return Err(VitError::ShapeMismatch(format!(
                "images are {}x{}x{}, model expects {}x{}x{}",
                images.height, images.width, images.channels, c.image_size, c.image_size, c.channels
            )));
        }
        Ok(())
    }

    /// Batched forward. Returns `batch × classes` logits and, when requested,
    /// one trace per image. Samples are independent, so the result does not
    /// depend on the rayon pool size.
    pub fn forward(&self, images: &Images, mode: TraceMode) -> Result<(Matrix, Option<Vec<ActivationTrace>>), VitError> {
        let outs = self.forward_outputs(images, mode)?;
        let classes = self.config.num_classes;
        let mut logits = Matrix::zeros(outs.len(), classes);
        for (i, o) in outs.iter().enumerate() {
            logits.row_mut(i).copy_from_slice(&o.logits);
        }
        let traces = (mode != TraceMode::Off)
            .then(|| outs.into_iter().map(|o| o.trace.expect("trace requested")).collect());
        Ok((logits, traces))
    }

    pub fn forward_outputs(&self, images: &Images, mode: TraceMode) -> Result<Vec<ImageOutput>, VitError> {
        self.check_images(images)?;
        Ok((0..images.count)
            .into_par_iter()
            .map(|i| self.forward_image(images.image(i), mode))
            .collect())
    }

    /// Rounds every parameter to f32 precision (the on-disk precision).
    pub fn round_to_f32(&mut self) {
        self.for_each_param(|v| *v = f64::from(*v as f32));
    }

    pub fn for_each_param(&mut self, mut f: impl FnMut(&mut f64)) {
        let vec = |v: &mut Vec<f64>, f: &mut dyn FnMut(&mut f64)| v.iter_mut().for_each(f);
        for v in self.patch_w.data_mut() {
            f(v);
        }
        vec(&mut self.patch_b, &mut f);
        vec(&mut self.cls_token, &mut f);
        self.pos_embed.data_mut().iter_mut().for_each(&mut f);
        for b in &mut self.blocks {
            for m in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2] {
                m.data_mut().iter_mut().for_each(&mut f);
            }
            for v in [
                &mut b.bq,
                &mut b.bk,
                &mut b.bv,
                &mut b.bo,
                &mut b.b1,
                &mut b.b2,
                &mut b.ln1.gamma,
                &mut b.ln1.beta,
                &mut b.ln2.gamma,
                &mut b.ln2.beta,
            ] {
                vec(v, &mut f);
            }
        }
        vec(&mut self.norm.gamma, &mut f);
        vec(&mut self.norm.beta, &mut f);
        self.head_w.data_mut().iter_mut().for_each(&mut f);
        vec(&mut self.head_b, &mut f);
    }
}

pub fn add_bias(m: &Matrix, bias: &[f64]) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Runs `f` on a rayon pool with exactly `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            dim: 8,
            depth: 2,
            heads: 2,
            head_dim: 4,
            mlp_hidden: 16,
            num_classes: 5,
        }
    }

    fn tiny_model(seed: u64) -> VitModel {
        synthesize_model(&tiny_config(), seed, Redundancy::default())
    }

    #[test]
    fn config_validation() {
        tiny_config().validate().unwrap();
        let bad = VitConfig { dim: 9, ..tiny_config() };
        assert!(bad.validate().is_err());
        let bad = VitConfig { image_size: 10, ..tiny_config() };
        assert!(bad.validate().is_err());
        let bad = VitConfig { num_classes: 0, ..tiny_config() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut m = tiny_model(1);
        m.for_each_param(|v| *v = 0.0);
        let imgs = Images::gaussian(2, 8, 2, 3);
        let (logits, _) = m.forward(&imgs, TraceMode::Off).unwrap();
        assert!(logits.max_abs() == 0.0);
    }

    #[test]
    fn batch_independence() {
        let m = tiny_model(2);
        let one = Images::gaussian(1, 8, 2, 4);
        let mut two_data = one.data.clone();
        two_data.extend_from_slice(&one.data);
        let two = Images::new(2, 8, 8, 2, two_data);
        let (a, _) = m.forward(&one, TraceMode::Off).unwrap();
        let (b, _) = m.forward(&two, TraceMode::Off).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(0), b.row(1));
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let m = tiny_model(2);
        let imgs = Images::gaussian(1, 4, 2, 0);
        assert!(matches!(m.forward(&imgs, TraceMode::Off), Err(VitError::ShapeMismatch(_))));
    }

    #[test]
    fn trace_shapes() {
        let m = tiny_model(3);
        let imgs = Images::gaussian(1, 8, 2, 5);
        let (_, traces) = m.forward(&imgs, TraceMode::WithLogits).unwrap();
        let t = &traces.unwrap()[0];
        assert_eq!(t.blocks.len(), 2);
        assert_eq!(t.blocks[0].mlp_hidden.shape(), (5, 16));
        assert_eq!(t.blocks[0].q.len(), 2);
        assert_eq!(t.blocks[0].q[1].shape(), (5, 4));
        assert_eq!(t.blocks[0].logits.as_ref().unwrap()[0].shape(), (5, 5));
    }

    #[test]
    fn gelu_exact_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn hidden_channel_permutation_equivariance() {
        let m = tiny_model(4);
        let imgs = Images::gaussian(3, 8, 2, 6);
        let (base, _) = m.forward(&imgs, TraceMode::Off).unwrap();
        let mut p = m.clone();
        let perm: Vec<usize> = (0..16).rev().collect();
        for b in &mut p.blocks {
            b.w1 = b.w1.select_rows(&perm);
            b.b1 = perm.iter().map(|&i| b.b1[i]).collect();
            b.w2 = b.w2.select_cols(&perm);
        }
        let (out, _) = p.forward(&imgs, TraceMode::Off).unwrap();
        assert!(out.sub(&base).max_abs() < 1e-6);
    }

    #[test]
    fn structural_removal_equals_masking() {
        let m = tiny_model(5);
        let imgs = Images::gaussian(3, 8, 2, 7);
        let j = 3;
        let mut masked = m.clone();
        for b in &mut masked.blocks {
            for c in 0..8 {
                b.w1[(j, c)] = 0.0;
                b.w2[(c, j)] = 0.0;
            }
            b.b1[j] = 0.0;
        }
        let mut removed = m.clone();
        let keep: Vec<usize> = (0..16).filter(|&i| i != j).collect();
        for b in &mut removed.blocks {
            b.w1 = b.w1.select_rows(&keep);
            b.b1 = keep.iter().map(|&i| b.b1[i]).collect();
            b.w2 = b.w2.select_cols(&keep);
        }
        removed.validate().unwrap();
        let (a, _) = masked.forward(&imgs, TraceMode::Off).unwrap();
        let (b, _) = removed.forward(&imgs, TraceMode::Off).unwrap();
        assert!(a.sub(&b).max_abs() < 1e-12);
    }

    #[test]
    fn qk_rotation_invariance() {
        let m = tiny_model(6);
        let imgs = Images::gaussian(2, 8, 2, 8);
        let (base, _) = m.forward(&imgs, TraceMode::Off).unwrap();
        let a = 0.7_f64;
        // orthogonal rotation in the (0, 1) plane of head 1
        let rot = Matrix::from_rows(&[
            vec![a.cos(), -a.sin(), 0.0, 0.0],
            vec![a.sin(), a.cos(), 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]);
        let mut r = m.clone();
        for b in &mut r.blocks {
            let (wq, bq, wk, bk) = b.head_qk(1);
            b.set_head_qk(1, wq.matmul(&rot), rot.t_matvec(&bq), wk.matmul(&rot), rot.t_matvec(&bk));
        }
        let (out, _) = r.forward(&imgs, TraceMode::Off).unwrap();
        assert!(out.sub(&base).max_abs() < 1e-6);
    }

    #[test]
    fn thread_count_does_not_change_logits() {
        let m = tiny_model(7);
        let imgs = Images::gaussian(6, 8, 2, 9);
        let (a, _) = with_threads(1, || m.forward(&imgs, TraceMode::Off).unwrap());
        let (b, _) = with_threads(3, || m.forward(&imgs, TraceMode::Off).unwrap());
        assert_eq!(a, b);
    }
}
