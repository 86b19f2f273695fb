//! Importance scores and kept/pruned index selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{AttnCalibStats, CalibError, MomentAccumulator};
use crate::linalg::Matrix;
use crate::vit::kept_count;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("sparsity must be in [0, 1), got {0}")]
    InvalidSparsity(f64),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Calib(#[from] CalibError),
}

/// Disjoint sorted kept (S) and pruned (P) index sets covering `0..width`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexPartition {
    kept: Vec<usize>,
    pruned: Vec<usize>,
    width: usize,
}

impl IndexPartition {
    pub fn new(mut kept: Vec<usize>, mut pruned: Vec<usize>, width: usize) -> Result<Self, RankError> {
        kept.sort_unstable();
        pruned.sort_unstable();
        if kept.is_empty() {
            return Err(RankError::InvalidPartition("kept set is empty".into()));
        }
        let mut seen = vec![false; width];
        for &i in kept.iter().chain(&pruned) {
            if i >= width || seen[i] {
                return Err(RankError::InvalidPartition(format!("index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(RankError::InvalidPartition("indices do not cover the axis".into()));
        }
        Ok(Self { kept, pruned, width })
    }

    /// Everything kept.
    pub fn identity(width: usize) -> Self {
        Self { kept: (0..width).collect(), pruned: vec![], width }
    }

    /// Keeps the `⌈(1 − s)·width⌉` highest scores; ties keep the lower index.
    pub fn from_scores(scores: &[f64], sparsity: f64) -> Result<Self, RankError> {
        check_sparsity(sparsity)?;
        let width = scores.len();
        if width == 0 {
            return Err(RankError::InvalidPartition("empty axis".into()));
        }
        let k = kept_count(width, sparsity);
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut kept = order[..k].to_vec();
        let mut pruned = order[k..].to_vec();
        kept.sort_unstable();
        pruned.sort_unstable();
        Ok(Self { kept, pruned, width })
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn pruned(&self) -> &[usize] {
        &self.pruned
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

fn check_sparsity(s: f64) -> Result<(), RankError> {
    if (0.0..1.0).contains(&s) {
        Ok(())
    } else {
        Err(RankError::InvalidSparsity(s))
    }
}

/// Scores hidden channels by `E[x_j²]`.
pub fn rank_mlp_activation(acc: &MomentAccumulator, sparsity: f64) -> Result<IndexPartition, RankError> {
    check_sparsity(sparsity)?;
    IndexPartition::from_scores(&acc.diag_second_moment()?, sparsity)
}

/// `‖row_j(W1)‖ · ‖col_j(W2)‖` for every hidden channel j.
pub fn mlp_magnitude_scores(w1: &Matrix, w2: &Matrix) -> Result<Vec<f64>, RankError> {
    if w1.rows() != w2.cols() || w1.cols() != w2.rows() {
        return Err(RankError::ShapeMismatch(format!("w1 {:?} vs w2 {:?}", w1.shape(), w2.shape())));
    }
    Ok((0..w1.rows())
        .map(|j| {
            let r: f64 = w1.row(j).iter().map(|v| v * v).sum();
            let c: f64 = (0..w2.rows()).map(|i| w2[(i, j)] * w2[(i, j)]).sum();
            (r * c).sqrt()
        })
        .collect())
}

pub fn rank_mlp_magnitude(w1: &Matrix, w2: &Matrix, sparsity: f64) -> Result<IndexPartition, RankError> {
    IndexPartition::from_scores(&mlp_magnitude_scores(w1, w2)?, sparsity)
}

/// Logit energy per head dimension, `diag(G_Q)_j · diag(G_K)_j / n²`.
pub fn attn_energy_scores(stats: &AttnCalibStats, block: usize, head: usize) -> Result<Vec<f64>, RankError> {
    let g = stats.gram(block, head)?;
    let n2 = (stats.n as f64).powi(2);
    Ok(g.g_q.diagonal().iter().zip(g.g_k.diagonal()).map(|(q, k)| q * k / n2).collect())
}

pub fn rank_attn(
    stats: &AttnCalibStats,
    block: usize,
    head: usize,
    sparsity: f64,
) -> Result<IndexPartition, RankError> {
    check_sparsity(sparsity)?;
    IndexPartition::from_scores(&attn_energy_scores(stats, block, head)?, sparsity)
}

/// `‖w_{Q,j}‖² · ‖w_{K,j}‖²` from one head's projection columns.
pub fn attn_magnitude_scores(wq: &Matrix, wk: &Matrix) -> Result<Vec<f64>, RankError> {
    if wq.shape() != wk.shape() {
        return Err(RankError::ShapeMismatch(format!("wq {:?} vs wk {:?}", wq.shape(), wk.shape())));
    }
    Ok((0..wq.cols())
        .map(|j| {
            let q: f64 = wq.col(j).iter().map(|v| v * v).sum();
            let k: f64 = wk.col(j).iter().map(|v| v * v).sum();
            q * k
        })
        .collect())
}
