use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use corp::analyze::DEFAULT_TAU;
use corp::cli::{self, CliError, PruneArgs};
use corp::config::{PruneConfig, Ranking};
use corp::fixture::{GenConfig, REFERENCE_SEED};
use corp::vit::with_threads;

#[derive(Parser)]
#[command(name = "corp", version, about = "One-shot ViT pruning with closed-form compensation")]
struct Cli {
    /// Worker threads (1 gives bit-reproducible runs on any machine).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model, calibration set and labelled eval set.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = REFERENCE_SEED)]
        seed: u64,
        /// JSON generator config; defaults to the built-in desk-scale fixture.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Prune and compensate a model.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// JSON prune config; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mlp_sparsity: Option<f64>,
        #[arg(long)]
        attn_sparsity: Option<f64>,
        #[arg(long)]
        lambda_mlp: Option<f64>,
        #[arg(long)]
        lambda_attn: Option<f64>,
        #[arg(long)]
        ranking: Option<Ranking>,
        #[arg(long)]
        recalibrate: bool,
        /// Drop channels without fitting any compensation.
        #[arg(long)]
        no_compensation: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Top-1/top-5 accuracy on a labelled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Unpruned model for the representation-distance metric.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and FLOP reductions for preset architectures.
    Flops {
        #[arg(long = "preset", default_values_t = ["deit_base".to_string(), "deit_huge".to_string()])]
        presets: Vec<String>,
        #[arg(long = "sparsity", default_values_t = [0.25, 0.5, 0.63, 0.69, 0.75])]
        sparsities: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Redundancy metrics of MLP hidden activations.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads;
    match cli.command {
        Command::Gen { out, seed, config } => {
            let cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(p)?;
                    serde_json::from_str::<GenConfig>(&text).map_err(|e| CliError::Validation(e.to_string()))?
                }
                None => GenConfig::default(),
            };
            print_json(&cli::cmd_gen(&cfg, seed, &out)?);
        }
        Command::Prune {
            model,
            calib,
            out,
            report,
            config,
            mlp_sparsity,
            attn_sparsity,
            lambda_mlp,
            lambda_attn,
            ranking,
            recalibrate,
            no_compensation,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => PruneConfig::from_json_file(p)?,
                None => PruneConfig::default(),
            };
            cfg.mlp_sparsity = mlp_sparsity.unwrap_or(cfg.mlp_sparsity);
            cfg.attn_sparsity = attn_sparsity.unwrap_or(cfg.attn_sparsity);
            cfg.lambda_mlp = lambda_mlp.or(cfg.lambda_mlp);
            cfg.lambda_attn = lambda_attn.or(cfg.lambda_attn);
            cfg.ranking = ranking.unwrap_or(cfg.ranking);
            cfg.recalibrate |= recalibrate;
            cfg.compensate &= !no_compensation;
            cfg.seed = seed.unwrap_or(cfg.seed);
            let args = PruneArgs { model: &model, calib: &calib, out: &out, report: &report, config: cfg, threads };
            let r = cli::cmd_prune(&args)?;
            eprintln!("pruned {} sites; report at {}", r.sites.len(), report.display());
        }
        Command::Eval { model, data, reference, out } => {
            let m = cli::cmd_eval(&model, &data, reference.as_deref())?;
            if let Some(p) = out {
                cli::save_json(&p, &m)?;
            }
            print_json(&m);
        }
        Command::Flops { presets, sparsities, out } => {
            let rows = cli::cmd_flops(&presets, &sparsities)?;
            print!("{}", cli::format_flops_table(&rows));
            if let Some(p) = out {
                cli::save_json(&p, &rows)?;
            }
        }
        Command::Analyze { model, calib, tau, out } => {
            let r = cli::cmd_analyze(&model, &calib, tau, 16)?;
            if let Some(p) = out {
                cli::save_json(&p, &r)?;
            }
            print_json(&r);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CORP_LOG", "error")).init();
    let cli = Cli::parse();
    let threads = cli.threads;
    match with_threads(threads, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
