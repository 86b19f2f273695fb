//! Command implementations behind the `corp` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyze::{build_report, AnalysisReport, AnalyzeError};
use crate::compensate::CompensationReport;
use crate::config::{ConfigError, PruneConfig};
use crate::data::{Dataset, Images};
use crate::fixture::{argmax_rows, generate, GenConfig};
use crate::prune::{prune_model, PruneError};
use crate::tensorfile::TensorFileError;
use crate::vit::{count_flops, count_params, preset, KeptWidths, ModelFileError, TraceMode, VitError, VitModel};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("numerical failure at {site}: {message}")]
    Numerical { site: String, message: String },
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical { .. } => 3,
            _ => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ModelFileError> for CliError {
    fn from(e: ModelFileError) -> Self {
        match e {
            ModelFileError::TensorFile(TensorFileError::Io(io)) => CliError::Io(io.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TensorFileError> for CliError {
    fn from(e: TensorFileError) -> Self {
        match e {
            TensorFileError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<VitError> for CliError {
    fn from(e: VitError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<AnalyzeError> for CliError {
    fn from(e: AnalyzeError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Paths written by [`cmd_gen`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenOutputs {
    pub model: PathBuf,
    pub calib: PathBuf,
    pub eval: PathBuf,
}

/// Writes `model.ctf` (+ sidecar), `calib.ctf` and `eval.ctf` into `out_dir`.
pub fn cmd_gen(cfg: &GenConfig, seed: u64, out_dir: &Path) -> Result<GenOutputs, CliError> {
    let fx = generate(cfg, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let outs = GenOutputs {
        model: out_dir.join("model.ctf"),
        calib: out_dir.join("calib.ctf"),
        eval: out_dir.join("eval.ctf"),
    };
    fx.model.save(&outs.model)?;
    Dataset { images: fx.calib, labels: None }.save(&outs.calib)?;
    fx.eval.save(&outs.eval)?;
    info!("generated fixture in {}", out_dir.display());
    Ok(outs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Record of one `prune` run. Wall times are the only non-deterministic
/// content, which is why the manifest is kept apart from the model and report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: PruneConfig,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub report: PathBuf,
    pub sites: usize,
    pub aborted_at: Option<String>,
    pub timings: Vec<StageTime>,
}

pub struct PruneArgs<'a> {
    pub model: &'a Path,
    pub calib: &'a Path,
    pub out: &'a Path,
    pub report: &'a Path,
    pub config: PruneConfig,
    pub threads: usize,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

/// Prunes a model file and writes the folded model, the compensation report
/// and a run manifest. The report is written even when a site fails.
pub fn cmd_prune(args: &PruneArgs) -> Result<CompensationReport, CliError> {
    args.config.validate()?;
    let mut timings = Vec::new();
    let t = Instant::now();
    let model = VitModel::load(args.model)?;
    let calib = Dataset::load(args.calib)?.images;
    timings.push(StageTime { stage: "load".into(), seconds: t.elapsed().as_secs_f64() });

    let t = Instant::now();
    let result = prune_model(&model, &calib, &args.config);
    timings.push(StageTime { stage: "prune".into(), seconds: t.elapsed().as_secs_f64() });

    let (pruned, report, failure) = match result {
        Ok(out) => (Some(out.model), out.report, None),
        Err(e) => {
            let numerical = e.is_numerical();
            match e {
                PruneError::Site { site, source, report } => {
                    let err = if numerical {
                        CliError::Numerical { site, message: source.to_string() }
                    } else {
                        CliError::Validation(format!("{site}: {source}"))
                    };
                    (None, *report, Some(err))
                }
                other => return Err(CliError::Validation(other.to_string())),
            }
        }
    };
    write_json(args.report, &report)?;
    let mut outputs = vec![args.report.to_path_buf()];
    if let Some(m) = &pruned {
        let t = Instant::now();
        m.save(args.out)?;
        timings.push(StageTime { stage: "write".into(), seconds: t.elapsed().as_secs_f64() });
        outputs.push(args.out.to_path_buf());
        outputs.push(crate::vit::sidecar_path(args.out));
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: args.config.clone(),
        seed: args.config.seed,
        threads: args.threads,
        inputs: vec![args.model.to_path_buf(), args.calib.to_path_buf()],
        outputs,
        report: args.report.to_path_buf(),
        sites: report.sites.len(),
        aborted_at: report.aborted_at.clone(),
        timings,
    };
    write_json(&manifest_path(args.out), &manifest)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub count: usize,
    /// Percent of images whose label is the top prediction.
    pub top1: f64,
    /// Percent of images whose label is among the five highest logits.
    pub top5: f64,
    /// Mean L2 distance of the final class-token representation to the
    /// reference model's, when a reference is given.
    pub mean_repr_error: Option<f64>,
}

/// Accuracy of `model` on a labelled dataset.
pub fn evaluate(model: &VitModel, data: &Dataset, reference: Option<&VitModel>) -> Result<EvalMetrics, CliError> {
    let labels = data.labels.as_ref().ok_or_else(|| CliError::Validation("dataset has no labels".into()))?;
    let outs = model.forward_outputs(&data.images, TraceMode::Off)?;
    let k = 5.min(model.config.num_classes);
    let (mut top1, mut top5) = (0usize, 0usize);
    for (o, &y) in outs.iter().zip(labels) {
        let mut order: Vec<usize> = (0..o.logits.len()).collect();
        order.sort_by(|&a, &b| o.logits[b].total_cmp(&o.logits[a]).then(a.cmp(&b)));
        top1 += usize::from(order[0] == y);
        top5 += usize::from(order[..k].contains(&y));
    }
    let n = outs.len();
    let pct = |c: usize| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 };
    let mean_repr_error = match reference {
        Some(r) => {
            let refs = r.forward_outputs(&data.images, TraceMode::Off)?;
            let total: f64 = outs
                .iter()
                .zip(&refs)
                .map(|(a, b)| a.repr.iter().zip(&b.repr).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .sum();
            Some(if n == 0 { 0.0 } else { total / n as f64 })
        }
        None => None,
    };
    Ok(EvalMetrics { count: n, top1: pct(top1), top5: pct(top5), mean_repr_error })
}

pub fn cmd_eval(model: &Path, data: &Path, reference: Option<&Path>) -> Result<EvalMetrics, CliError> {
    let m = VitModel::load(model)?;
    let d = Dataset::load(data)?;
    let r = reference.map(VitModel::load).transpose()?;
    evaluate(&m, &d, r.as_ref())
}

/// One row of the efficiency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub preset: String,
    pub sparsity: f64,
    pub params: u64,
    pub flops: u64,
    /// Reductions when only query/key widths and MLP hidden shrink.
    pub params_reduction_qk: f64,
    pub flops_reduction_qk: f64,
    /// Reductions when the whole attention inner width shrinks too.
    pub params_reduction_uniform: f64,
    pub flops_reduction_uniform: f64,
}

pub fn flops_row(name: &str, sparsity: f64) -> Result<FlopsRow, CliError> {
    let c = preset(name).ok_or_else(|| CliError::Validation(format!("unknown preset {name:?}")))?;
    if !(0.0..1.0).contains(&sparsity) {
        return Err(CliError::Validation(format!("sparsity must be in [0, 1), got {sparsity}")));
    }
    let full = KeptWidths::full(&c);
    let (p0, f0) = (count_params(&c, &full) as f64, count_flops(&c, &full) as f64);
    let qk = KeptWidths::uniform(&c, sparsity, sparsity, false);
    let uni = KeptWidths::uniform(&c, sparsity, sparsity, true);
    let red = |v: u64, base: f64| 100.0 * (1.0 - v as f64 / base);
    Ok(FlopsRow {
        preset: name.into(),
        sparsity,
        params: count_params(&c, &qk),
        flops: count_flops(&c, &qk),
        params_reduction_qk: red(count_params(&c, &qk), p0),
        flops_reduction_qk: red(count_flops(&c, &qk), f0),
        params_reduction_uniform: red(count_params(&c, &uni), p0),
        flops_reduction_uniform: red(count_flops(&c, &uni), f0),
    })
}

pub fn cmd_flops(presets: &[String], sparsities: &[f64]) -> Result<Vec<FlopsRow>, CliError> {
    let mut rows = Vec::new();
    for p in presets {
        for &s in sparsities {
            rows.push(flops_row(p, s)?);
        }
    }
    Ok(rows)
}

pub fn format_flops_table(rows: &[FlopsRow]) -> String {
    let mut out = format!(
        "{:<11} {:>6} {:>14} {:>18} {:>8} {:>8} {:>8} {:>8}\n",
        "preset", "s", "params", "flops", "P↓qk%", "F↓qk%", "P↓all%", "F↓all%"
    );
    for r in rows {
        out += &format!(
            "{:<11} {:>6.2} {:>14} {:>18} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
            r.preset,
            r.sparsity,
            r.params,
            r.flops,
            r.params_reduction_qk,
            r.flops_reduction_qk,
            r.params_reduction_uniform,
            r.flops_reduction_uniform
        );
    }
    out
}

pub fn cmd_analyze(model: &Path, calib: &Path, tau: f64, shard: usize) -> Result<AnalysisReport, CliError> {
    let m = VitModel::load(model)?;
    let images: Images = Dataset::load(calib)?.images;
    Ok(build_report(&m, &images, tau, shard)?)
}

/// Prediction agreement helper used by evaluation scripts and tests.
pub fn predictions(model: &VitModel, images: &Images) -> Result<Vec<usize>, CliError> {
    let (logits, _) = model.forward(images, TraceMode::Off)?;
    Ok(argmax_rows(&logits))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_json(path, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    #[test]
    fn flops_presets() {
        let r = flops_row("deit_base", 0.5).unwrap();
        assert!((r.params_reduction_uniform - 49.1).abs() <= 1.0);
        assert!((r.flops_reduction_uniform - 49.6).abs() <= 2.0);
        let zero = flops_row("deit_huge", 0.0).unwrap();
        assert_eq!(zero.params_reduction_qk, 0.0);
        assert_eq!(zero.flops_reduction_uniform, 0.0);
        assert!(matches!(flops_row("deit_giant", 0.5), Err(CliError::Validation(_))));
        let table = format_flops_table(&[r]);
        assert_eq!(table.lines().count(), 2);
    }

    #[test]
    fn eval_counts_top1_and_top5() {
        let mut cfg = GenConfig::default();
        cfg.model.depth = 1;
        cfg.eval_count = 6;
        let fx = generate(&cfg, 3).unwrap();
        let m = evaluate(&fx.model, &fx.eval, Some(&fx.model)).unwrap();
        assert_eq!(m.top1, 100.0);
        assert_eq!(m.top5, 100.0);
        assert_eq!(m.mean_repr_error, Some(0.0));
        let unlabeled = Dataset { images: fx.eval.images.clone(), labels: None };
        assert!(evaluate(&fx.model, &unlabeled, None).is_err());
    }

    #[test]
    fn constant_class_model() {
        let mut cfg = GenConfig::default();
        cfg.model.depth = 1;
        cfg.eval_count = 5;
        let mut fx = generate(&cfg, 4).unwrap();
        fx.model.head_w = Matrix::zeros(10, 32);
        fx.model.head_b = (0..10).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        let data = Dataset { images: fx.eval.images, labels: Some(vec![0; 5]) };
        let m = evaluate(&fx.model, &data, None).unwrap();
        assert_eq!(m.top1, 100.0);
        assert!(m.top5 >= m.top1);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 2);
        assert_eq!(CliError::Numerical { site: "s".into(), message: "m".into() }.exit_code(), 3);
    }
}
