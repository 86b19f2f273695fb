//! Closed-form compensation fits and their exact folds into retained weights.
//!
//! MLP: pruned hidden activations are predicted as `x_P ≈ B x_S + c` (ridge
//! regression on centered moments) and the prediction is folded into `W2`.
//!
//! Attention: the missing logit term `Q_P K_Pᵀ` is approximated by
//! `Q_S M K_Sᵀ`, with `M` solving `G_Q M G_K + λM = C_Q C_K`. The factor
//! `I + M = u vᵀ` is folded into the kept query and key columns.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{HeadGram, SecondMoments};
use crate::linalg::{condition_estimate, dot, solve_ridge, solve_sylvester_ridge, svd, sylvester_residual, LinalgError, Matrix};
use crate::rank::IndexPartition;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompensateError {
    #[error("need at least 2 calibration samples, got {0}")]
    InsufficientSamples(u64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Relative λ used when no explicit value is configured.
pub const DEFAULT_LAMBDA_SCALE: f64 = 1e-2;
/// Floor for energy-relative λ when every kept activation is constant.
const LAMBDA_FLOOR: f64 = 1e-12;

/// `x_P ≈ B x_S + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCompensation {
    /// |P| × |S|
    pub b: Matrix,
    pub c: Vec<f64>,
    pub lambda: f64,
    /// Condition estimate of `Σ̄_SS + λI`.
    pub cond: f64,
}

/// `Q_P K_Pᵀ ≈ Q_S M K_Sᵀ`, with `I + M = u vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCompensation {
    pub m: Matrix,
    pub u: Matrix,
    pub v: Matrix,
    pub lambda: f64,
    /// `‖G_Q M G_K + λM − C_Q C_K‖_max`
    pub residual: f64,
    /// `‖Q_P K_Pᵀ‖_F` on the calibration tokens.
    pub pre_err: f64,
    /// `‖Q_P K_Pᵀ − Q_S M K_Sᵀ‖_F` on the calibration tokens.
    pub post_err: f64,
}

/// Centered scatter `X̄ X̄ᵀ = n(Σ − μμᵀ)` from uncentered moments.
fn centered(n: f64, sigma: &Matrix, mu_r: &[f64], mu_c: &[f64]) -> Matrix {
    Matrix::from_fn(sigma.rows(), sigma.cols(), |i, j| n * (sigma[(i, j)] - mu_r[i] * mu_c[j]))
}

/// `tr(Σ̄_SS) / |S|` scaled by [`DEFAULT_LAMBDA_SCALE`].
pub fn default_lambda_mlp(m: &SecondMoments) -> f64 {
    let k = m.mu_s.len().max(1) as f64;
    let n = m.n as f64;
    let tr: f64 = (0..m.mu_s.len()).map(|i| n * (m.sigma_ss[(i, i)] - m.mu_s[i] * m.mu_s[i])).sum();
    (DEFAULT_LAMBDA_SCALE * tr / k).max(LAMBDA_FLOOR)
}

/// `tr(G_Q) · tr(G_K) / d'²` scaled by [`DEFAULT_LAMBDA_SCALE`], over the kept block.
pub fn default_lambda_attn(g: &HeadGram, partition: &IndexPartition) -> f64 {
    let s = partition.kept();
    let tq: f64 = s.iter().map(|&i| g.g_q[(i, i)]).sum();
    let tk: f64 = s.iter().map(|&i| g.g_k[(i, i)]).sum();
    let d = s.len() as f64;
    (DEFAULT_LAMBDA_SCALE * tq * tk / (d * d)).max(LAMBDA_FLOOR)
}

/// Ridge fit `B (Σ̄_SS + λI) = Σ̄_PS`, `c = μ_P − B μ_S`.
pub fn fit_mlp_affine(m: &SecondMoments, lambda: f64) -> Result<AffineCompensation, CompensateError> {
    let (ks, kp) = (m.mu_s.len(), m.mu_p.len());
    if m.sigma_ss.shape() != (ks, ks) || m.sigma_ps.shape() != (kp, ks) {
        return Err(CompensateError::ShapeMismatch(format!(
            "sigma_ss {:?}, sigma_ps {:?} for |S|={ks}, |P|={kp}",
            m.sigma_ss.shape(),
            m.sigma_ps.shape()
        )));
    }
    if m.n < 2 {
        return Err(CompensateError::InsufficientSamples(m.n));
    }
    let n = m.n as f64;
    let c_ss = centered(n, &m.sigma_ss, &m.mu_s, &m.mu_s).symmetrize();
    let c_ps = centered(n, &m.sigma_ps, &m.mu_p, &m.mu_s);
    let b = solve_ridge(&c_ss, &c_ps, lambda)?;
    let b_mu = b.matvec(&m.mu_s);
    let c = m.mu_p.iter().zip(&b_mu).map(|(p, q)| p - q).collect();
    let cond = condition_estimate(&c_ss.add_diagonal(lambda))?;
    Ok(AffineCompensation { b, c, lambda, cond })
}

/// `(pre, post)` output errors of a pruned MLP layer on the calibration set.
///
/// `pre = ‖W_P X_P‖_F` (channels simply dropped) and
/// `post = ‖W_P (X_P − B X_S − c𝟙ᵀ)‖_F` (after the fold), both evaluated from
/// moments without revisiting the tokens.
pub fn mlp_output_errors(w_p: &Matrix, m: &SecondMoments, comp: &AffineCompensation) -> (f64, f64) {
    let n = m.n as f64;
    // E[r rᵀ] with r = x_P − B x_S − c; using c = μ_P − Bμ_S it reduces to
    // Σ_PP − Σ_PS Bᵀ − B Σ_SP + B Σ_SS Bᵀ − c cᵀ
    let b = &comp.b;
    let ps_bt = m.sigma_ps.matmul_t(b);
    let mut r = m.sigma_pp.sub(&ps_bt).sub(&ps_bt.transpose()).add(&b.matmul(&m.sigma_ss).matmul_t(b));
    for i in 0..r.rows() {
        for j in 0..r.cols() {
            r[(i, j)] -= comp.c[i] * comp.c[j];
        }
    }
    let energy = |cov: &Matrix| -> f64 { (n * w_p.matmul(cov).matmul_t(w_p).trace()).max(0.0).sqrt() };
    (energy(&m.sigma_pp), energy(&r))
}

/// Returns `(W_S + W_P B, b + W_P c)`.
pub fn fold_mlp(
    w2: &Matrix,
    b2: &[f64],
    partition: &IndexPartition,
    comp: &AffineCompensation,
) -> Result<(Matrix, Vec<f64>), CompensateError> {
    let (s, p) = (partition.kept(), partition.pruned());
    if w2.cols() != partition.width() || b2.len() != w2.rows() {
        return Err(CompensateError::ShapeMismatch(format!(
            "w2 {:?}, b2 {} for width {}",
            w2.shape(),
            b2.len(),
            partition.width()
        )));
    }
    if comp.b.shape() != (p.len(), s.len()) || comp.c.len() != p.len() {
        return Err(CompensateError::ShapeMismatch(format!(
            "B {:?}, c {} for |S|={}, |P|={}",
            comp.b.shape(),
            comp.c.len(),
            s.len(),
            p.len()
        )));
    }
    let w_s = w2.select_cols(s);
    let w_p = w2.select_cols(p);
    let w = w_s.add(&w_p.matmul(&comp.b));
    let wc = w_p.matvec(&comp.c);
    let b = b2.iter().zip(&wc).map(|(a, d)| a + d).collect();
    Ok((w, b))
}

/// Fits logit compensation for one head from its full Grams.
pub fn fit_attn_logit(
    g: &HeadGram,
    partition: &IndexPartition,
    lambda: f64,
) -> Result<LogitCompensation, CompensateError> {
    let w = partition.width();
    if g.g_q.shape() != (w, w) || g.g_k.shape() != (w, w) {
        return Err(CompensateError::ShapeMismatch(format!(
            "grams {:?}/{:?} for head width {w}",
            g.g_q.shape(),
            g.g_k.shape()
        )));
    }
    if !(lambda > 0.0) {
        return Err(LinalgError::NonPositiveLambda(lambda).into());
    }
    let (s, p) = (partition.kept(), partition.pruned());
    let gq = g.g_q.select(s, s);
    let gk = g.g_k.select(s, s);
    let cq = g.g_q.select(s, p);
    let ck = g.g_k.select(p, s);
    let rhs = cq.matmul(&ck);
    let m = solve_sylvester_ridge(&gq, &gk, &rhs, lambda)?;
    let residual = sylvester_residual(&gq, &gk, &m, &rhs, lambda);

    let dec = svd(&Matrix::identity(s.len()).add(&m))?;
    let root: Vec<f64> = dec.singular_values.iter().map(|&x| if x < 1e-12 { 0.0 } else { x.sqrt() }).collect();
    let u = Matrix::from_fn(s.len(), s.len(), |i, j| dec.u[(i, j)] * root[j]);
    let v = Matrix::from_fn(s.len(), s.len(), |i, j| dec.v[(i, j)] * root[j]);

    // ‖Q_P K_Pᵀ‖² = ⟨G_Q,PP, G_K,PP⟩ and
    // ‖Q_P K_Pᵀ − Q_S M K_Sᵀ‖² = that − 2⟨M, C_Q C_K⟩ + ⟨M, G_Q M G_K⟩
    let inner = |a: &Matrix, b: &Matrix| dot(a.data(), b.data());
    let pre2 = inner(&g.g_q.select(p, p), &g.g_k.select(p, p)).max(0.0);
    let post2 = pre2 - 2.0 * inner(&m, &rhs) + inner(&m, &gq.matmul(&m).matmul(&gk));
    Ok(LogitCompensation { m, u, v, lambda, residual, pre_err: pre2.sqrt(), post_err: post2.max(0.0).sqrt() })
}

/// Returns `(W_Q,S u, uᵀ b_Q,S, W_K,S v, vᵀ b_K,S)`.
pub fn fold_attn(
    wq: &Matrix,
    bq: &[f64],
    wk: &Matrix,
    bk: &[f64],
    partition: &IndexPartition,
    comp: &LogitCompensation,
) -> Result<(Matrix, Vec<f64>, Matrix, Vec<f64>), CompensateError> {
    let s = partition.kept();
    let w = partition.width();
    if wq.cols() != w || wk.cols() != w || bq.len() != w || bk.len() != w || wq.rows() != wk.rows() {
        return Err(CompensateError::ShapeMismatch(format!(
            "wq {:?}, wk {:?}, biases {}/{} for head width {w}",
            wq.shape(),
            wk.shape(),
            bq.len(),
            bk.len()
        )));
    }
    if comp.u.shape() != (s.len(), s.len()) || comp.v.shape() != (s.len(), s.len()) {
        return Err(CompensateError::ShapeMismatch(format!("u {:?} for |S|={}", comp.u.shape(), s.len())));
    }
    let bq_s: Vec<f64> = s.iter().map(|&i| bq[i]).collect();
    let bk_s: Vec<f64> = s.iter().map(|&i| bk[i]).collect();
    Ok((
        wq.select_cols(s).matmul(&comp.u),
        comp.u.t_matvec(&bq_s),
        wk.select_cols(s).matmul(&comp.v),
        comp.v.t_matvec(&bk_s),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Mlp,
    Attn,
}

/// Diagnostics for one compensated site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteReport {
    pub site: String,
    pub kind: SiteKind,
    pub kept: Vec<usize>,
    pub pruned: Vec<usize>,
    pub lambda: f64,
    pub pre_err: f64,
    pub post_err: f64,
    /// `None` when the condition number is unbounded.
    pub cond: Option<f64>,
    pub sylvester_residual: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompensationReport {
    pub sites: Vec<SiteReport>,
    /// Site at which a numerical failure stopped the run.
    pub aborted_at: Option<String>,
}

impl CompensationReport {
    /// Sites whose post error exceeds the pre error beyond `slack`.
    pub fn monotonicity_violations(&self, slack: f64) -> Vec<&SiteReport> {
        self.sites.iter().filter(|s| s.post_err > s.pre_err + slack * (1.0 + s.pre_err)).collect()
    }
}
