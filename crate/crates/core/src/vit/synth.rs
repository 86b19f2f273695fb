//! Seeded toy models with planted redundancy, standing in for pretrained
//! checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Block, LayerNorm, VitConfig, VitModel};
use crate::linalg::Matrix;

/// How much low-rank structure to plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Redundancy {
    /// Fraction in (0, 1]: MLP `W1` rows are drawn from
    /// `⌈rank_fraction · hidden⌉` prototype directions, and each head's
    /// query/key columns from `⌈rank_fraction · head_dim⌉` directions.
    pub rank_fraction: f64,
    /// Fraction of hidden channels biased towards being inactive.
    pub sparsity_level: f64,
}

impl Default for Redundancy {
    fn default() -> Self {
        Self { rank_fraction: 1.0, sparsity_level: 0.0 }
    }
}

/// Gain on query/key columns; sets the typical attention logit scale.
const QK_GAIN: f64 = 1.5;
/// Gain on the MLP output projection relative to a unit-variance init.
const MLP_OUT_GAIN: f64 = 2.0;
const HEAD_GAIN: f64 = 3.0;
/// Relative off-prototype noise on `W1` rows and query/key columns.
const ROW_NOISE: f64 = 0.05;

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn normal(&mut self, std: f64) -> f64 {
        Normal::new(0.0, std).expect("finite std").sample(&mut self.rng)
    }

    fn vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal(std)).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_vec(rows, cols, self.vec(rows * cols, std))
    }

    fn layer_norm(&mut self, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: (0..dim).map(|_| 1.0 + self.normal(0.1)).collect(),
            beta: self.vec(dim, 0.05),
        }
    }

    /// `dim × width` columns spanning a `rank`-dimensional subspace (plus noise).
    fn low_rank_columns(&mut self, dim: usize, width: usize, rank: usize, gain: f64) -> Matrix {
        let basis = self.matrix(dim, rank, 1.0 / (dim as f64).sqrt());
        let mix = self.matrix(rank, width, gain / (rank as f64).sqrt());
        let noise = self.matrix(dim, width, gain * ROW_NOISE / (dim as f64).sqrt());
        basis.matmul(&mix).add(&noise)
    }
}

fn planted_rank(fraction: f64, width: usize) -> usize {
    ((fraction * width as f64 - 1e-9).ceil() as usize).clamp(1, width)
}

/// Deterministic per `seed`: the same inputs yield bit-identical models.
pub fn synthesize_model(config: &VitConfig, seed: u64, redundancy: Redundancy) -> VitModel {
    config.validate().expect("valid config");
    assert!(
        redundancy.rank_fraction > 0.0 && redundancy.rank_fraction <= 1.0,
        "rank_fraction must be in (0, 1]"
    );
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(seed) };
    let c = config;
    let d = c.dim;
    let hid = c.mlp_hidden;

    let patch_w = g.matrix(d, c.patch_len(), 1.0 / (c.patch_len() as f64).sqrt());
    let patch_b = g.vec(d, 0.1);
    let cls_token = g.vec(d, 1.0);
    let pos_embed = g.matrix(c.tokens(), d, 0.1);

    let qk_rank = planted_rank(redundancy.rank_fraction, c.head_dim);
    let mlp_rank = planted_rank(redundancy.rank_fraction, hid);
    let full_rank = mlp_rank == hid;

    let mut blocks = Vec::with_capacity(c.depth);
    for _ in 0..c.depth {
        let ln1 = g.layer_norm(d);
        let mut wq_parts = Vec::new();
        let mut wk_parts = Vec::new();
        for _ in 0..c.heads {
            wq_parts.push(g.low_rank_columns(d, c.head_dim, qk_rank, QK_GAIN));
            wk_parts.push(g.low_rank_columns(d, c.head_dim, qk_rank, QK_GAIN));
        }
        let wq = Matrix::hstack(&wq_parts);
        let wk = Matrix::hstack(&wk_parts);
        let bq = g.vec(d, 0.1);
        let bk = g.vec(d, 0.1);
        let wv = g.matrix(d, d, 1.0 / (d as f64).sqrt());
        let bv = g.vec(d, 0.05);
        let wo = g.matrix(d, d, 1.0 / (d as f64).sqrt());
        let bo = g.vec(d, 0.05);
        let ln2 = g.layer_norm(d);

        // W1: each hidden channel is a scaled copy of one prototype direction
        let protos = g.matrix(mlp_rank, d, 1.0 / (d as f64).sqrt());
        let proto_bias = g.vec(mlp_rank, 0.5);
        let mut w1 = Matrix::zeros(hid, d);
        let mut b1 = vec![0.0; hid];
        for j in 0..hid {
            let p = if full_rank { j } else { g.rng.random_range(0..mlp_rank) };
            let s = g.rng.random_range(0.7..1.3);
            for k in 0..d {
                w1[(j, k)] = s * protos[(p, k)] + g.normal(ROW_NOISE / (d as f64).sqrt());
            }
            b1[j] = s * proto_bias[p] + g.normal(0.05);
            if g.rng.random::<f64>() < redundancy.sparsity_level {
                b1[j] -= 3.0;
            }
        }
        let w2 = g.matrix(d, hid, MLP_OUT_GAIN / (hid as f64).sqrt());
        let b2 = g.vec(d, 0.05);
        blocks.push(Block {
            ln1,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2,
            w1,
            b1,
            w2,
            b2,
            qk_dims: vec![c.head_dim; c.heads],
        });
    }
    let norm = g.layer_norm(d);
    let head_w = g.matrix(c.num_classes, d, HEAD_GAIN / (d as f64).sqrt());
    let head_b = g.vec(c.num_classes, 0.05);

    let mut model = VitModel { config: *c, patch_w, patch_b, cls_token, pos_embed, blocks, norm, head_w, head_b };
    model.round_to_f32();
    model
}
