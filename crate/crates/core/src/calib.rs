//! Streaming calibration statistics.
//!
//! A sample is one token's activation vector. Only sums are kept, so memory
//! is O(d²) per tap regardless of the calibration set size.

use rayon::prelude::*;
use thiserror::Error;

use crate::data::Images;
use crate::linalg::Matrix;
use crate::rank::IndexPartition;
use crate::vit::{TraceMode, VitError, VitModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("batch width {got} does not match accumulator width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("accumulator holds no samples")]
    EmptyAccumulator,
    #[error("no statistics for block {block} head {head}")]
    MissingStats { block: usize, head: usize },
    #[error(transparent)]
    Shape(#[from] VitError),
}

/// Running count, sum and sum of outer products.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    n: u64,
    sum: Vec<f64>,
    sum_outer: Matrix,
}

/// Uncentered moments restricted to a kept/pruned split.
#[derive(Debug, Clone)]
pub struct SecondMoments {
    pub n: u64,
    pub mu_s: Vec<f64>,
    pub mu_p: Vec<f64>,
    /// `E[x_S x_Sᵀ]`
    pub sigma_ss: Matrix,
    /// `E[x_P x_Sᵀ]`
    pub sigma_ps: Matrix,
    /// `E[x_P x_Pᵀ]`
    pub sigma_pp: Matrix,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { n: 0, sum: vec![0.0; dim], sum_outer: Matrix::zeros(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    /// `Σ xᵢ xᵢᵀ`
    pub fn sum_outer(&self) -> &Matrix {
        &self.sum_outer
    }

    /// Adds every row of `batch` (samples × dim).
    pub fn accumulate(&mut self, batch: &Matrix) -> Result<(), CalibError> {
        if batch.cols() != self.dim() {
            return Err(CalibError::WidthMismatch { expected: self.dim(), got: batch.cols() });
        }
        for r in 0..batch.rows() {
            for (s, v) in self.sum.iter_mut().zip(batch.row(r)) {
                *s += v;
            }
        }
        self.sum_outer = self.sum_outer.add(&batch.t_matmul(batch));
        self.n += batch.rows() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<(), CalibError> {
        if other.dim() != self.dim() {
            return Err(CalibError::WidthMismatch { expected: self.dim(), got: other.dim() });
        }
        self.n += other.n;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        self.sum_outer = self.sum_outer.add(&other.sum_outer);
        Ok(())
    }

    fn require_samples(&self) -> Result<f64, CalibError> {
        if self.n == 0 {
            Err(CalibError::EmptyAccumulator)
        } else {
            Ok(self.n as f64)
        }
    }

    pub fn mean(&self) -> Result<Vec<f64>, CalibError> {
        let n = self.require_samples()?;
        Ok(self.sum.iter().map(|s| s / n).collect())
    }

    /// `E[x xᵀ]`
    pub fn second_moment(&self) -> Result<Matrix, CalibError> {
        let n = self.require_samples()?;
        Ok(self.sum_outer.scale(1.0 / n))
    }

    /// `E[x_j²]` per channel.
    pub fn diag_second_moment(&self) -> Result<Vec<f64>, CalibError> {
        let n = self.require_samples()?;
        Ok(self.sum_outer.diagonal().iter().map(|v| v / n).collect())
    }

    /// Centered scatter `Σ (x − μ)(x − μ)ᵀ = Σ xxᵀ − n μμᵀ`.
    pub fn centered_scatter(&self) -> Result<Matrix, CalibError> {
        let mu = self.mean()?;
        let n = self.n as f64;
        let out = Matrix::from_fn(self.dim(), self.dim(), |i, j| self.sum_outer[(i, j)] - n * mu[i] * mu[j]);
        Ok(out.symmetrize())
    }

    /// Population covariance `E[xxᵀ] − μμᵀ`.
    pub fn covariance(&self) -> Result<Matrix, CalibError> {
        Ok(self.centered_scatter()?.scale(1.0 / self.n as f64))
    }

    pub fn second_moments(&self, partition: &IndexPartition) -> Result<SecondMoments, CalibError> {
        if partition.width() != self.dim() {
            return Err(CalibError::WidthMismatch { expected: self.dim(), got: partition.width() });
        }
        let mu = self.mean()?;
        let m = self.second_moment()?;
        let (s, p) = (partition.kept(), partition.pruned());
        Ok(SecondMoments {
            n: self.n,
            mu_s: s.iter().map(|&i| mu[i]).collect(),
            mu_p: p.iter().map(|&i| mu[i]).collect(),
            sigma_ss: m.select(s, s),
            sigma_ps: m.select(p, s),
            sigma_pp: m.select(p, p),
        })
    }
}

/// Full per-head Grams `QᵀQ` and `KᵀK` over all calibration tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGram {
    pub g_q: Matrix,
    pub g_k: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnCalibStats {
    /// Number of tokens accumulated.
    pub n: u64,
    /// `[block][head]`
    pub grams: Vec<Vec<HeadGram>>,
}

impl AttnCalibStats {
    pub fn zeros(model: &VitModel) -> Self {
        let grams = model
            .blocks
            .iter()
            .map(|b| {
                b.qk_dims
                    .iter()
                    .map(|&w| HeadGram { g_q: Matrix::zeros(w, w), g_k: Matrix::zeros(w, w) })
                    .collect()
            })
            .collect();
        Self { n: 0, grams }
    }

    pub fn gram(&self, block: usize, head: usize) -> Result<&HeadGram, CalibError> {
        self.grams
            .get(block)
            .and_then(|b| b.get(head))
            .filter(|_| self.n > 0)
            .ok_or(CalibError::MissingStats { block, head })
    }

    fn merge(&mut self, other: &AttnCalibStats) {
        self.n += other.n;
        for (a, b) in self.grams.iter_mut().flatten().zip(other.grams.iter().flatten()) {
            a.g_q = a.g_q.add(&b.g_q);
            a.g_k = a.g_k.add(&b.g_k);
        }
    }
}

/// Everything one calibration pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibStats {
    /// Post-GELU hidden activations, one accumulator per block.
    pub mlp: Vec<MomentAccumulator>,
    pub attn: AttnCalibStats,
}

impl CalibStats {
    pub fn zeros(model: &VitModel) -> Self {
        Self {
            mlp: model.blocks.iter().map(|b| MomentAccumulator::new(b.mlp_hidden())).collect(),
            attn: AttnCalibStats::zeros(model),
        }
    }

    fn add_image(&mut self, model: &VitModel, image: &[f32]) {
        let out = model.forward_image(image, TraceMode::On);
        let trace = out.trace.expect("trace requested");
        for (i, bt) in trace.blocks.iter().enumerate() {
            self.mlp[i].accumulate(&bt.mlp_hidden).expect("trace width matches model");
            for (h, g) in self.attn.grams[i].iter_mut().enumerate() {
                g.g_q = g.g_q.add(&bt.q[h].t_matmul(&bt.q[h]));
                g.g_k = g.g_k.add(&bt.k[h].t_matmul(&bt.k[h]));
            }
        }
        self.attn.n += model.config.tokens() as u64;
    }

    pub fn merge(&mut self, other: &CalibStats) -> Result<(), CalibError> {
        for (a, b) in self.mlp.iter_mut().zip(&other.mlp) {
            a.merge(b)?;
        }
        self.attn.merge(&other.attn);
        Ok(())
    }
}

/// One pass over `images`, in shards of `shard_size` images.
///
/// Shards run in parallel on the current rayon pool and are merged in shard
/// order, so the result is bit-identical for any thread count.
pub fn collect_stats(model: &VitModel, images: &Images, shard_size: usize) -> Result<CalibStats, CalibError> {
    let c = &model.config;
    if images.height != c.image_size || images.width != c.image_size || images.channels != c.channels {
        return Err(VitError::ShapeMismatch(format!(
            "calibration images {}x{}x{} vs model {}x{}x{}",
            images.height, images.width, images.channels, c.image_size, c.image_size, c.channels
        ))
        .into());
    }
    let shard = shard_size.max(1);
    let starts: Vec<usize> = (0..images.count).step_by(shard).collect();
    let partials: Vec<CalibStats> = starts
        .par_iter()
        .map(|&start| {
            let mut s = CalibStats::zeros(model);
            for i in start..(start + shard).min(images.count) {
                s.add_image(model, images.image(i));
            }
            s
        })
        .collect();
    let mut total = CalibStats::zeros(model);
    for p in &partials {
        total.merge(p)?;
    }
    Ok(total)
}

pub fn collect_attn_stats(model: &VitModel, images: &Images) -> Result<AttnCalibStats, CalibError> {
    Ok(collect_stats(model, images, 16)?.attn)
}
