//! Redundancy metrics over MLP hidden activations: spectral effective rank,
//! the number of modes holding 95% of the variance, and activation sparsity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{CalibError, MomentAccumulator};
use crate::data::Images;
use crate::linalg::{sym_eig, LinalgError, Matrix};
use crate::vit::{count_flops, count_params, TraceMode, VitError, VitModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyzeError {
    #[error("covariance has zero trace")]
    ZeroTrace,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Shape(#[from] VitError),
}

/// Default magnitude below which an activation counts as zero.
pub const DEFAULT_TAU: f64 = 1e-3;
/// A channel is "rarely active" when active on fewer than this share of tokens.
const RARELY_ACTIVE: f64 = 0.01;
const ENERGY: f64 = 0.95;

fn spectrum(cov: &Matrix) -> Result<Vec<f64>, AnalyzeError> {
    let eig = sym_eig(cov)?;
    let values = eig.clamped_eigenvalues();
    if !(values.iter().sum::<f64>() > 0.0) {
        return Err(AnalyzeError::ZeroTrace);
    }
    Ok(values)
}

/// `exp(−Σ pᵢ ln pᵢ)` over the normalized eigenvalue spectrum.
pub fn effective_rank(cov: &Matrix) -> Result<f64, AnalyzeError> {
    let values = spectrum(cov)?;
    let total: f64 = values.iter().sum();
    let entropy: f64 = values.iter().map(|v| v / total).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
    Ok(entropy.exp())
}

/// Smallest k whose k largest values sum to at least 95% of the total.
fn k_energy(mut values: Vec<f64>) -> Result<usize, AnalyzeError> {
    values.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(AnalyzeError::ZeroTrace);
    }
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if acc >= ENERGY * total {
            return Ok(i + 1);
        }
    }
    Ok(values.len())
}

/// Spectral k95 of a covariance.
pub fn k95(cov: &Matrix) -> Result<usize, AnalyzeError> {
    k_energy(spectrum(cov)?)
}

/// k95 over per-channel variances (no rotation).
pub fn k95_channel(cov: &Matrix) -> Result<usize, AnalyzeError> {
    k_energy(cov.diagonal().into_iter().map(|v| v.max(0.0)).collect())
}

/// Streaming count of near-zero entries, overall and per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityCounter {
    tau: f64,
    tokens: u64,
    zeros: u64,
    active_per_channel: Vec<u64>,
}

impl SparsityCounter {
    pub fn new(dim: usize, tau: f64) -> Self {
        Self { tau, tokens: 0, zeros: 0, active_per_channel: vec![0; dim] }
    }

    pub fn accumulate(&mut self, batch: &Matrix) {
        for r in 0..batch.rows() {
            for (j, v) in batch.row(r).iter().enumerate() {
                if v.abs() <= self.tau {
                    self.zeros += 1;
                } else {
                    self.active_per_channel[j] += 1;
                }
            }
        }
        self.tokens += batch.rows() as u64;
    }

    pub fn merge(&mut self, other: &SparsityCounter) {
        self.tokens += other.tokens;
        self.zeros += other.zeros;
        for (a, b) in self.active_per_channel.iter_mut().zip(&other.active_per_channel) {
            *a += b;
        }
    }

    /// Fraction of entries with `|a| ≤ τ`.
    pub fn element_sparsity(&self) -> f64 {
        let total = self.tokens * self.active_per_channel.len() as u64;
        if total == 0 {
            return 0.0;
        }
        self.zeros as f64 / total as f64
    }

    /// Fraction of channels active on fewer than 1% of tokens.
    pub fn channel_sparsity(&self) -> f64 {
        if self.active_per_channel.is_empty() || self.tokens == 0 {
            return 0.0;
        }
        let limit = RARELY_ACTIVE * self.tokens as f64;
        let rare = self.active_per_channel.iter().filter(|&&a| (a as f64) < limit).count();
        rare as f64 / self.active_per_channel.len() as f64
    }
}

/// Fraction of entries of `samples` with `|a| ≤ tau`.
pub fn activation_sparsity(samples: &Matrix, tau: f64) -> f64 {
    let mut c = SparsityCounter::new(samples.cols(), tau);
    c.accumulate(samples);
    c.element_sparsity()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapReport {
    pub name: String,
    pub dim: usize,
    pub eff_rank: f64,
    pub rank_ratio: f64,
    pub k95: usize,
    pub k95_ratio: f64,
    pub k95_channel: usize,
    pub act_sparsity: f64,
    pub channel_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub taps: Vec<TapReport>,
    pub params: u64,
    pub flops: u64,
}

struct Partial {
    moments: Vec<MomentAccumulator>,
    sparsity: Vec<SparsityCounter>,
}

impl Partial {
    fn new(model: &VitModel, tau: f64) -> Self {
        Self {
            moments: model.blocks.iter().map(|b| MomentAccumulator::new(b.mlp_hidden())).collect(),
            sparsity: model.blocks.iter().map(|b| SparsityCounter::new(b.mlp_hidden(), tau)).collect(),
        }
    }
}

/// One row per MLP hidden tap, plus parameter and FLOP totals.
pub fn build_report(model: &VitModel, calib: &Images, tau: f64, shard_size: usize) -> Result<AnalysisReport, AnalyzeError> {
    model.check_images(calib)?;
    let shard = shard_size.max(1);
    let starts: Vec<usize> = (0..calib.count).step_by(shard).collect();
    let partials: Vec<Result<Partial, CalibError>> = starts
        .par_iter()
        .map(|&start| {
            let mut p = Partial::new(model, tau);
            for i in start..(start + shard).min(calib.count) {
                let trace = model.forward_image(calib.image(i), TraceMode::On).trace.expect("trace requested");
                for (j, bt) in trace.blocks.iter().enumerate() {
                    p.moments[j].accumulate(&bt.mlp_hidden)?;
                    p.sparsity[j].accumulate(&bt.mlp_hidden);
                }
            }
            Ok(p)
        })
        .collect();
    let mut total = Partial::new(model, tau);
    for p in partials {
        let p = p?;
        for (a, b) in total.moments.iter_mut().zip(&p.moments) {
            a.merge(b)?;
        }
        for (a, b) in total.sparsity.iter_mut().zip(&p.sparsity) {
            a.merge(b);
        }
    }
    let mut taps = Vec::with_capacity(model.blocks.len());
    for (i, (acc, sp)) in total.moments.iter().zip(&total.sparsity).enumerate() {
        let cov = acc.covariance()?;
        let dim = acc.dim();
        let eff = effective_rank(&cov)?;
        let k = k95(&cov)?;
        taps.push(TapReport {
            name: format!("block.{i}.mlp.hidden"),
            dim,
            eff_rank: eff,
            rank_ratio: eff / dim as f64,
            k95: k,
            k95_ratio: k as f64 / dim as f64,
            k95_channel: k95_channel(&cov)?,
            act_sparsity: sp.element_sparsity(),
            channel_sparsity: sp.channel_sparsity(),
        });
    }
    let widths = model.kept_widths();
    Ok(AnalysisReport {
        taps,
        params: count_params(&model.config, &widths),
        flops: count_flops(&model.config, &widths),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;
    use crate::vit::{synthesize_model, Redundancy, VitConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        let r = Matrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
        r.t_matmul(&r)
    }

    fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        let a = Matrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
        svd(&a).unwrap().u
    }

    #[test]
    fn effective_rank_examples() {
        assert!((effective_rank(&Matrix::identity(7)).unwrap() - 7.0).abs() < 1e-10);
        let v = [1.0, 2.0, -1.0];
        let rank1 = Matrix::from_fn(3, 3, |i, j| v[i] * v[j]);
        assert!((effective_rank(&rank1).unwrap() - 1.0).abs() < 1e-6);
        assert!((effective_rank(&Matrix::diag(&[0.5, 0.5, 0.0, 0.0])).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(effective_rank(&Matrix::zeros(3, 3)), Err(AnalyzeError::ZeroTrace));
    }

    #[test]
    fn k95_examples() {
        assert_eq!(k95(&Matrix::identity(100)).unwrap(), 95);
        assert_eq!(k95(&Matrix::diag(&[96.0, 1.0, 1.0, 1.0, 1.0])).unwrap(), 1);
        assert_eq!(k95(&Matrix::zeros(2, 2)), Err(AnalyzeError::ZeroTrace));
    }

    #[test]
    fn k95_matches_prefix_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = random_psd(&mut rng, 8);
            let mut ev = sym_eig(&a).unwrap().clamped_eigenvalues();
            ev.sort_by(|x, y| y.total_cmp(x));
            let total: f64 = ev.iter().sum();
            let oracle = (1..=8).find(|&k| ev[..k].iter().sum::<f64>() >= 0.95 * total).unwrap();
            assert_eq!(k95(&a).unwrap(), oracle);
        }
    }

    #[test]
    fn channel_k95_uses_diagonal() {
        // strongly correlated pair: one spectral mode, two channels
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(k95(&a).unwrap(), 1);
        assert_eq!(k95_channel(&a).unwrap(), 2);
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(activation_sparsity(&Matrix::zeros(3, 4), DEFAULT_TAU), 1.0);
        assert_eq!(activation_sparsity(&Matrix::from_fn(3, 4, |_, _| 1.0), 0.01), 0.0);
        let half = Matrix::from_fn(4, 4, |i, _| (i % 2) as f64);
        assert_eq!(activation_sparsity(&half, DEFAULT_TAU), 0.5);
    }

    #[test]
    fn channel_sparsity_counts_rare_channels() {
        let mut c = SparsityCounter::new(2, DEFAULT_TAU);
        let mut m = Matrix::zeros(200, 2);
        for r in 0..200 {
            m[(r, 0)] = 1.0;
        }
        m[(0, 1)] = 1.0;
        c.accumulate(&m);
        assert_eq!(c.channel_sparsity(), 0.5);
    }

    #[test]
    fn spectral_metrics_are_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let a = random_psd(&mut rng, 6);
            let u = random_orthogonal(&mut rng, 6);
            let b = u.t_matmul(&a).matmul(&u).symmetrize();
            assert!((effective_rank(&a).unwrap() - effective_rank(&b).unwrap()).abs() < 1e-8);
            assert_eq!(k95(&a).unwrap(), k95(&b).unwrap());
        }
    }

    proptest! {
        #[test]
        fn effective_rank_bounds(seed in 0u64..1000, d in 1usize..8, rank in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rank = rank.min(d);
            let f = Matrix::from_fn(d, rank, |_, _| StandardNormal.sample(&mut rng));
            let a = f.matmul_t(&f);
            let er = effective_rank(&a).unwrap();
            let ev = sym_eig(&a).unwrap().eigenvalues;
            let exact = ev.iter().filter(|&&v| v > 1e-10 * ev[0]).count();
            prop_assert!(er >= 1.0 - 1e-9);
            prop_assert!(er <= exact as f64 + 1e-9);
        }

        #[test]
        fn k95_monotone_under_top_mass(seed in 0u64..1000, extra in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ev: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            let before = k95(&Matrix::diag(&ev)).unwrap();
            ev[0] += extra;
            prop_assert!(k95(&Matrix::diag(&ev)).unwrap() <= before);
        }
    }

    fn toy() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            dim: 32,
            depth: 2,
            heads: 4,
            head_dim: 8,
            mlp_hidden: 128,
            num_classes: 10,
        }
    }

    #[test]
    fn report_on_planted_redundancy() {
        let m = synthesize_model(&toy(), 3, Redundancy { rank_fraction: 0.1, sparsity_level: 0.0 });
        let calib = Images::gaussian(32, 8, 3, 4);
        let r = build_report(&m, &calib, DEFAULT_TAU, 8).unwrap();
        assert_eq!(r.taps.len(), 2);
        for t in &r.taps {
            assert!(t.rank_ratio < 0.3, "{}: {}", t.name, t.rank_ratio);
            assert!(t.eff_rank >= 1.0 && t.eff_rank <= t.dim as f64);
            assert!((1..=t.dim).contains(&t.k95));
            assert!((0.0..=1.0).contains(&t.act_sparsity));
        }
        assert_eq!(r.params, count_params(&m.config, &m.kept_widths()));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<AnalysisReport>(&json).unwrap(), r);
    }

    #[test]
    fn report_is_thread_invariant() {
        let m = synthesize_model(&toy(), 5, Redundancy::default());
        let calib = Images::gaussian(10, 8, 3, 6);
        let a = crate::vit::with_threads(1, || build_report(&m, &calib, DEFAULT_TAU, 3).unwrap());
        let b = crate::vit::with_threads(4, || build_report(&m, &calib, DEFAULT_TAU, 3).unwrap());
        assert_eq!(a, b);
    }
}
