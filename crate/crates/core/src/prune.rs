//! The one-shot pipeline: one statistics pass, then rank, fit and fold every
//! MLP block followed by every attention head.

use log::{debug, info};
use thiserror::Error;

use crate::calib::{collect_stats, AttnCalibStats, CalibError, CalibStats, MomentAccumulator};
use crate::compensate::{
    default_lambda_attn, default_lambda_mlp, fit_attn_logit, fit_mlp_affine, fold_attn, fold_mlp, mlp_output_errors,
    AffineCompensation, CompensateError, CompensationReport, SiteKind, SiteReport,
};
use crate::config::{ConfigError, PruneConfig, Ranking};
use crate::data::Images;
use crate::linalg::{LinalgError, Matrix};
use crate::rank::{rank_attn, rank_mlp_activation, rank_mlp_magnitude, IndexPartition, RankError};
use crate::vit::VitModel;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error("{site}: {source}")]
    Site {
        site: String,
        source: CompensateError,
        /// Sites completed before the failure, with `aborted_at` set.
        report: Box<CompensationReport>,
    },
}

impl PruneError {
    /// True for solver failures (as opposed to invalid inputs).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            PruneError::Site {
                source: CompensateError::Linalg(LinalgError::SingularSystem(_) | LinalgError::NoConvergence),
                ..
            }
        )
    }
}

/// Kept/pruned split of every prunable axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub mlp: Vec<IndexPartition>,
    /// `[block][head]`
    pub attn: Vec<Vec<IndexPartition>>,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub model: VitModel,
    pub report: CompensationReport,
}

pub fn mlp_site(block: usize) -> String {
    format!("block.{block}.mlp")
}

pub fn attn_site(block: usize, head: usize) -> String {
    format!("block.{block}.attn.head{head}")
}

fn plan_mlp(model: &VitModel, acc: &MomentAccumulator, block: usize, cfg: &PruneConfig) -> Result<IndexPartition, RankError> {
    let b = &model.blocks[block];
    match cfg.ranking {
        Ranking::Activation => rank_mlp_activation(acc, cfg.mlp_sparsity),
        Ranking::Magnitude => rank_mlp_magnitude(&b.w1, &b.w2, cfg.mlp_sparsity),
    }
}

fn plan_heads(model: &VitModel, attn: &AttnCalibStats, block: usize, cfg: &PruneConfig) -> Result<Vec<IndexPartition>, RankError> {
    (0..model.blocks[block].qk_dims.len()).map(|h| rank_attn(attn, block, h, cfg.attn_sparsity)).collect()
}

/// Ranks every site from one set of statistics.
pub fn plan(model: &VitModel, stats: &CalibStats, cfg: &PruneConfig) -> Result<PrunePlan, RankError> {
    let depth = model.blocks.len();
    Ok(PrunePlan {
        mlp: (0..depth).map(|i| plan_mlp(model, &stats.mlp[i], i, cfg)).collect::<Result<_, _>>()?,
        attn: (0..depth).map(|i| plan_heads(model, &stats.attn, i, cfg)).collect::<Result<_, _>>()?,
    })
}

/// Prunes (and if configured compensates) the MLP of one block in place.
pub fn prune_mlp_block(
    model: &mut VitModel,
    block: usize,
    acc: &MomentAccumulator,
    partition: &IndexPartition,
    cfg: &PruneConfig,
) -> Result<SiteReport, CompensateError> {
    let m = acc.second_moments(partition).map_err(|e| CompensateError::ShapeMismatch(e.to_string()))?;
    let (s, p) = (partition.kept(), partition.pruned());
    let (comp, lambda, cond) = if cfg.compensate {
        let lambda = cfg.lambda_mlp.unwrap_or_else(|| default_lambda_mlp(&m));
        let comp = fit_mlp_affine(&m, lambda)?;
        let cond = comp.cond;
        (comp, lambda, Some(cond).filter(|c| c.is_finite()))
    } else {
        let comp = AffineCompensation { b: Matrix::zeros(p.len(), s.len()), c: vec![0.0; p.len()], lambda: 0.0, cond: 1.0 };
        (comp, 0.0, None)
    };
    let b = &mut model.blocks[block];
    let w_p = b.w2.select_cols(p);
    let (pre_err, mut post_err) = mlp_output_errors(&w_p, &m, &comp);
    if !cfg.compensate {
        post_err = pre_err;
    }
    let (w2, b2) = fold_mlp(&b.w2, &b.b2, partition, &comp)?;
    b.w1 = b.w1.select_rows(s);
    b.b1 = s.iter().map(|&i| b.b1[i]).collect();
    b.w2 = w2;
    b.b2 = b2;
    Ok(SiteReport {
        site: mlp_site(block),
        kind: SiteKind::Mlp,
        kept: s.to_vec(),
        pruned: p.to_vec(),
        lambda,
        pre_err,
        post_err,
        cond,
        sylvester_residual: None,
    })
}

/// Prunes (and if configured compensates) one head's query/key columns in place.
pub fn prune_head(
    model: &mut VitModel,
    block: usize,
    head: usize,
    attn: &AttnCalibStats,
    partition: &IndexPartition,
    cfg: &PruneConfig,
) -> Result<SiteReport, CompensateError> {
    let g = attn.gram(block, head).map_err(|e| CompensateError::ShapeMismatch(e.to_string()))?;
    let b = &mut model.blocks[block];
    let (wq, bq, wk, bk) = b.head_qk(head);
    let s = partition.kept();
    let site = attn_site(block, head);
    let report = if cfg.compensate {
        let lambda = cfg.lambda_attn.unwrap_or_else(|| default_lambda_attn(g, partition));
        let comp = fit_attn_logit(g, partition, lambda)?;
        let (wq2, bq2, wk2, bk2) = fold_attn(&wq, &bq, &wk, &bk, partition, &comp)?;
        b.set_head_qk(head, wq2, bq2, wk2, bk2);
        SiteReport {
            site,
            kind: SiteKind::Attn,
            kept: s.to_vec(),
            pruned: partition.pruned().to_vec(),
            lambda,
            pre_err: comp.pre_err,
            post_err: comp.post_err,
            cond: None,
            sylvester_residual: Some(comp.residual),
        }
    } else {
        let p = partition.pruned();
        let pre = crate::linalg::dot(g.g_q.select(p, p).data(), g.g_k.select(p, p).data()).max(0.0).sqrt();
        let pick = |v: &[f64]| s.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        b.set_head_qk(head, wq.select_cols(s), pick(&bq), wk.select_cols(s), pick(&bk));
        SiteReport {
            site,
            kind: SiteKind::Attn,
            kept: s.to_vec(),
            pruned: p.to_vec(),
            lambda: 0.0,
            pre_err: pre,
            post_err: pre,
            cond: None,
            sylvester_residual: None,
        }
    };
    Ok(report)
}

fn site_error(site: String, source: CompensateError, mut report: CompensationReport) -> PruneError {
    report.aborted_at = Some(site.clone());
    PruneError::Site { site, source, report: Box::new(report) }
}

/// Applies a plan using one set of statistics: all MLP blocks front to back,
/// then all heads.
pub fn apply_plan(
    model: &VitModel,
    stats: &CalibStats,
    plan: &PrunePlan,
    cfg: &PruneConfig,
) -> Result<PruneOutcome, PruneError> {
    cfg.validate()?;
    let mut out = model.clone();
    let mut report = CompensationReport::default();
    for (i, part) in plan.mlp.iter().enumerate() {
        match prune_mlp_block(&mut out, i, &stats.mlp[i], part, cfg) {
            Ok(r) => report.sites.push(r),
            Err(e) => return Err(site_error(mlp_site(i), e, report)),
        }
    }
    for (i, heads) in plan.attn.iter().enumerate() {
        for (h, part) in heads.iter().enumerate() {
            match prune_head(&mut out, i, h, &stats.attn, part, cfg) {
                Ok(r) => report.sites.push(r),
                Err(e) => return Err(site_error(attn_site(i, h), e, report)),
            }
        }
    }
    Ok(PruneOutcome { model: out, report })
}

/// Full pipeline from calibration images.
///
/// Without `recalibrate` the statistics are collected once from the
/// unpruned model. With it, each block's attention and MLP statistics are
/// refreshed from the partially pruned model just before that site is fit.
pub fn prune_model(model: &VitModel, calib: &Images, cfg: &PruneConfig) -> Result<PruneOutcome, PruneError> {
    cfg.validate()?;
    if !cfg.recalibrate {
        let stats = collect_stats(model, calib, cfg.calib_batch)?;
        info!("collected statistics over {} tokens", stats.attn.n);
        let plan = plan(model, &stats, cfg)?;
        return apply_plan(model, &stats, &plan, cfg);
    }
    let mut out = model.clone();
    let mut report = CompensationReport::default();
    for i in 0..model.blocks.len() {
        let stats = collect_stats(&out, calib, cfg.calib_batch)?;
        for (h, part) in plan_heads(&out, &stats.attn, i, cfg)?.iter().enumerate() {
            match prune_head(&mut out, i, h, &stats.attn, part, cfg) {
                Ok(r) => report.sites.push(r),
                Err(e) => return Err(site_error(attn_site(i, h), e, report)),
            }
        }
        let stats = collect_stats(&out, calib, cfg.calib_batch)?;
        let part = plan_mlp(&out, &stats.mlp[i], i, cfg)?;
        match prune_mlp_block(&mut out, i, &stats.mlp[i], &part, cfg) {
            Ok(r) => report.sites.push(r),
            Err(e) => return Err(site_error(mlp_site(i), e, report)),
        }
        debug!("block {i} recalibrated and pruned");
    }
    Ok(PruneOutcome { model: out, report })
}
