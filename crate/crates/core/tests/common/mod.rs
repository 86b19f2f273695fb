//! Shared oracles for the integration tests.
//!
//! `scalar_forward` re-implements the ViT forward pass with plain loops and
//! no library matrix routines. Given the *unpruned* weights plus explicit
//! compensation terms it evaluates the compensated network directly:
//! MLP pruned activations are replaced at run time by `B x_S + c`, and head
//! logits by `Q_S (I + M) K_Sᵀ`. Folded models must reproduce it.

#![allow(dead_code, clippy::needless_range_loop)]

use corp::linalg::Matrix;
use corp::rank::IndexPartition;
use corp::vit::VitModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct MlpComp {
    pub partition: IndexPartition,
    pub b: Matrix,
    pub c: Vec<f64>,
}

pub struct HeadComp {
    pub partition: IndexPartition,
    pub m: Matrix,
}

/// Per block: optional MLP compensation and per-head optional logit compensation.
#[derive(Default)]
pub struct ExplicitComp {
    pub mlp: Vec<Option<MlpComp>>,
    pub attn: Vec<Vec<Option<HeadComp>>>,
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * gamma[i] + beta[i]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn scalar_forward(model: &VitModel, image: &[f32], comp: Option<&ExplicitComp>) -> Vec<f64> {
    let c = &model.config;
    let d = c.dim;
    let side = c.image_size / c.patch_size;
    let tokens = c.tokens();
    let mut x = vec![vec![0.0; d]; tokens];
    for j in 0..d {
        x[0][j] = model.cls_token[j] + model.pos_embed[(0, j)];
    }
    for pi in 0..side {
        for pj in 0..side {
            let mut patch = Vec::new();
            for dy in 0..c.patch_size {
                for dx in 0..c.patch_size {
                    for ch in 0..c.channels {
                        let y = pi * c.patch_size + dy;
                        let xx = pj * c.patch_size + dx;
                        patch.push(f64::from(image[(y * c.image_size + xx) * c.channels + ch]));
                    }
                }
            }
            let t = 1 + pi * side + pj;
            for j in 0..d {
                let mut s = model.patch_b[j] + model.pos_embed[(t, j)];
                for (k, p) in patch.iter().enumerate() {
                    s += model.patch_w[(j, k)] * p;
                }
                x[t][j] = s;
            }
        }
    }
    let scale = 1.0 / (c.head_dim as f64).sqrt();
    for (bi, b) in model.blocks.iter().enumerate() {
        let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &b.ln1.gamma, &b.ln1.beta)).collect();
        let proj = |w: &Matrix, bias: &[f64], col: usize| -> Vec<f64> {
            h.iter().map(|r| bias[col] + (0..d).map(|i| r[i] * w[(i, col)]).sum::<f64>()).collect()
        };
        let mut concat = vec![vec![0.0; d]; tokens];
        let mut off = 0;
        for head in 0..c.heads {
            let w = b.qk_dims[head];
            let q: Vec<Vec<f64>> = (off..off + w).map(|col| proj(&b.wq, &b.bq, col)).collect();
            let k: Vec<Vec<f64>> = (off..off + w).map(|col| proj(&b.wk, &b.bk, col)).collect();
            off += w;
            let hc = comp.and_then(|e| e.attn.get(bi)).and_then(|v| v.get(head)).and_then(|o| o.as_ref());
            let mut logits = vec![vec![0.0; tokens]; tokens];
            for t in 0..tokens {
                for u in 0..tokens {
                    logits[t][u] = match hc {
                        None => (0..w).map(|j| q[j][t] * k[j][u]).sum(),
                        Some(hc) => {
                            let s = hc.partition.kept();
                            let mut acc = 0.0;
                            for (a, &ia) in s.iter().enumerate() {
                                for (bb, &ib) in s.iter().enumerate() {
                                    let id = if a == bb { 1.0 } else { 0.0 };
                                    acc += q[ia][t] * (id + hc.m[(a, bb)]) * k[ib][u];
                                }
                            }
                            acc
                        }
                    };
                }
            }
            let v: Vec<Vec<f64>> = (head * c.head_dim..(head + 1) * c.head_dim).map(|col| proj(&b.wv, &b.bv, col)).collect();
            for t in 0..tokens {
                let row: Vec<f64> = logits[t].iter().map(|l| l * scale).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..c.head_dim {
                    concat[t][head * c.head_dim + j] = (0..tokens).map(|u| e[u] / z * v[j][u]).sum();
                }
            }
        }
        for t in 0..tokens {
            for j in 0..d {
                x[t][j] += b.bo[j] + (0..d).map(|i| concat[t][i] * b.wo[(i, j)]).sum::<f64>();
            }
        }
        let mc = comp.and_then(|e| e.mlp.get(bi)).and_then(|o| o.as_ref());
        for t in 0..tokens {
            let h2 = layer_norm(&x[t], &b.ln2.gamma, &b.ln2.beta);
            let mut a: Vec<f64> = (0..b.w1.rows())
                .map(|j| gelu(b.b1[j] + (0..d).map(|i| b.w1[(j, i)] * h2[i]).sum::<f64>()))
                .collect();
            if let Some(mc) = mc {
                let s = mc.partition.kept();
                for (pi, &p) in mc.partition.pruned().iter().enumerate() {
                    a[p] = mc.c[pi] + s.iter().enumerate().map(|(si, &sj)| mc.b[(pi, si)] * a[sj]).sum::<f64>();
                }
            }
            for i in 0..d {
                x[t][i] += b.b2[i] + a.iter().enumerate().map(|(j, aj)| b.w2[(i, j)] * aj).sum::<f64>();
            }
        }
    }
    let repr = layer_norm(&x[0], &model.norm.gamma, &model.norm.beta);
    (0..c.num_classes)
        .map(|k| model.head_b[k] + (0..d).map(|i| model.head_w[(k, i)] * repr[i]).sum::<f64>())
        .collect()
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Dense Gaussian elimination with partial pivoting; solves `A x = b` for
/// every column of `b`.
pub fn dense_solve(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let cols = b[0].len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, rb)| r.iter().chain(rb).copied().collect()).collect();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
        m.swap(k, p);
        for i in k + 1..n {
            let f = m[i][k] / m[k][k];
            for j in k..n + cols {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    let mut x = vec![vec![0.0; cols]; n];
    for c in 0..cols {
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j][c]).sum();
            x[i][c] = (m[i][n + c] - s) / m[i][i];
        }
    }
    x
}
