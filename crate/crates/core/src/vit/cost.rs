//! Parameter and FLOP accounting for (pruned) architectures.

use serde::{Deserialize, Serialize};

use super::VitConfig;

/// Elementwise cost of one LayerNorm application per element.
const LN_FLOPS_PER_ELEM: u64 = 5;
/// Elementwise cost of softmax per logit (exp, sum, divide).
const SOFTMAX_FLOPS_PER_ELEM: u64 = 3;

/// Per-block widths that survive pruning.
///
/// `v_dims` is the attention inner width on the value/output side. The
/// pruner never touches it; it exists so that the accounting can also
/// describe uniformly width-pruned attention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptWidths {
    pub mlp_hidden: Vec<usize>,
    pub qk_dims: Vec<Vec<usize>>,
    pub v_dims: Vec<Vec<usize>>,
}

/// `⌈(1 − s)·width⌉`, at least 1. Guards against `0.7 * 10 = 7.000000000000001`.
pub fn kept_count(width: usize, sparsity: f64) -> usize {
    let raw = (1.0 - sparsity) * width as f64;
    ((raw - 1e-9).ceil() as usize).clamp(1, width.max(1))
}

impl KeptWidths {
    pub fn full(c: &VitConfig) -> Self {
        Self::uniform(c, 0.0, 0.0, false)
    }

    /// Uniform sparsity per block. With `prune_value` the value/output width
    /// shrinks by the attention sparsity as well.
    pub fn uniform(c: &VitConfig, mlp_sparsity: f64, attn_sparsity: f64, prune_value: bool) -> Self {
        let qk = kept_count(c.head_dim, attn_sparsity);
        let v = if prune_value { qk } else { c.head_dim };
        Self {
            mlp_hidden: vec![kept_count(c.mlp_hidden, mlp_sparsity); c.depth],
            qk_dims: vec![vec![qk; c.heads]; c.depth],
            v_dims: vec![vec![v; c.heads]; c.depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.mlp_hidden.len()
    }
}

/// Exact parameter count: embeddings, every block (projections, biases,
/// LayerNorm scales and shifts), final norm and classifier.
pub fn count_params(c: &VitConfig, kept: &KeptWidths) -> u64 {
    let d = c.dim as u64;
    let mut total = d * c.patch_len() as u64 + d // patch embedding
        + d // class token
        + c.tokens() as u64 * d // positions
        + 2 * d // final norm
        + d * c.num_classes as u64 + c.num_classes as u64;
    for i in 0..kept.depth() {
        let qk: u64 = kept.qk_dims[i].iter().map(|&w| w as u64).sum();
        let v: u64 = kept.v_dims[i].iter().map(|&w| w as u64).sum();
        let hid = kept.mlp_hidden[i] as u64;
        total += 4 * d; // two norms
        total += 2 * (d * qk + qk); // query, key
        total += d * v + v; // value
        total += v * d + d; // output projection
        total += hid * d + hid + d * hid + d; // mlp
    }
    total
}

/// FLOPs of one forward pass: 2 per multiply-accumulate for every matmul,
/// plus linear terms for LayerNorm and softmax.
pub fn count_flops(c: &VitConfig, kept: &KeptWidths) -> u64 {
    let d = c.dim as u64;
    let t = c.tokens() as u64;
    let n = c.num_patches() as u64;
    let mut total = 2 * n * d * c.patch_len() as u64 // patch embedding
        + LN_FLOPS_PER_ELEM * t * d // final norm
        + 2 * d * c.num_classes as u64; // head
    for i in 0..kept.depth() {
        let qk: u64 = kept.qk_dims[i].iter().map(|&w| w as u64).sum();
        let v: u64 = kept.v_dims[i].iter().map(|&w| w as u64).sum();
        let hid = kept.mlp_hidden[i] as u64;
        let heads = kept.qk_dims[i].len() as u64;
        total += 2 * t * d * (2 * qk + v); // q, k, v projections
        total += 2 * t * t * qk; // Q Kᵀ
        total += SOFTMAX_FLOPS_PER_ELEM * heads * t * t;
        total += 2 * t * t * v; // attention · V
        total += 2 * t * v * d; // output projection
        total += 2 * 2 * t * d * hid; // mlp
        total += 2 * LN_FLOPS_PER_ELEM * t * d;
    }
    total
}

pub const PRESETS: [&str; 5] = ["deit_tiny", "deit_small", "deit_base", "deit_large", "deit_huge"];

/// DeiT-family architectures at 224px with 1000 classes.
pub fn preset(name: &str) -> Option<VitConfig> {
    let (dim, depth, heads, patch) = match name {
        "deit_tiny" => (192, 12, 3, 16),
        "deit_small" => (384, 12, 6, 16),
        "deit_base" => (768, 12, 12, 16),
        "deit_large" => (1024, 24, 16, 16),
        "deit_huge" => (1280, 32, 16, 14),
        _ => return None,
    };
    Some(VitConfig {
        image_size: 224,
        patch_size: patch,
        channels: 3,
        dim,
        depth,
        heads,
        head_dim: dim / heads,
        mlp_hidden: 4 * dim,
        num_classes: 1000,
    })
}
