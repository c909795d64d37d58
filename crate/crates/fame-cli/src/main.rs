//! `fame` — train and audit fairness-aware multimodal fusion models on
//! synthetic or file-supplied per-modality embeddings.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fame_core::cohort::{BiasSpec, GeneratorConfig};
use fame_core::model::FusionMode;
use fame_core::train::TrainConfig;

use crate::commands::SweepParam;
use crate::config::KeyValues;

const OUT_DIR_ENV: &str = "FAME_OUT_DIR";

#[derive(Parser)]
#[command(name = "fame", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort file with optional subgroup bias injection
    Generate(GenerateArgs),
    /// Train a fusion model and write checkpoint, trajectory, metrics, predictions
    Train(TrainArgs),
    /// Evaluate a checkpoint on a cohort split and write the fairness report
    Evaluate(EvaluateArgs),
    /// Compute the fairness report for an exported predictions CSV
    Audit(AuditArgs),
    /// Sweep lambda or gamma over seeds and write plot-ready rows
    Sweep(SweepArgs),
    /// Run the ablation matrix over fusion variants
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator config file (flat key-value)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output cohort path (default: $FAME_OUT_DIR/cohort.jsonl)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Modality widths, e.g. demographic:16,structured:64,notes:64
    #[arg(long)]
    widths: Option<String>,
    /// Per-modality class separation, e.g. demographic:3.0
    #[arg(long)]
    signals: Option<String>,
    /// Ethnicity marginals in canonical subgroup order, comma separated
    #[arg(long)]
    marginals_ethnicity: Option<String>,
    #[arg(long)]
    marginals_insurance: Option<String>,
    #[arg(long)]
    marginals_age_bucket: Option<String>,
    /// Per-task positive prevalences, comma separated
    #[arg(long)]
    prevalences: Option<String>,
    /// Bias injection modality:attribute:subgroup:strength (repeatable)
    #[arg(long)]
    bias: Vec<String>,
}

/// Training hyperparameters as CLI overrides; unset flags fall back to the
/// config file, then to the defaults.
#[derive(Args, Clone)]
struct TrainOpts {
    /// Training config file (flat key-value)
    #[arg(long)]
    config: Option<PathBuf>,
    /// fame, eddi_only, sigmoid_only, average, or dfc
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    l1_alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    plateau_factor: Option<f64>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    proj_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Cohort JSONL file
    #[arg(long)]
    cohort: PathBuf,
    /// Output directory (default: $FAME_OUT_DIR/run)
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// test, val, train, or all
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Report path (default: $FAME_OUT_DIR/report.json)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// Predictions CSV: id,task,score,label,ethnicity,insurance,age_bucket
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Report path (default: $FAME_OUT_DIR/report.json)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Lambda values, comma separated (mutually exclusive with --gammas)
    #[arg(long)]
    lambdas: Option<String>,
    /// Gamma values, comma separated
    #[arg(long)]
    gammas: Option<String>,
    /// Seeds, comma separated
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    /// Aggregate CSV path (default: $FAME_OUT_DIR/sweep.csv)
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Variant subset, comma separated (default: all modes + unimodal runs)
    #[arg(long)]
    variants: Option<String>,
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    /// Comparison CSV path (default: $FAME_OUT_DIR/ablation.csv)
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

fn resolve_out(explicit: Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
    match explicit {
        Some(path) => Ok(path),
        None => match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) => Ok(PathBuf::from(dir).join(default_name)),
            None => bail!("no output path given and {OUT_DIR_ENV} is not set"),
        },
    }
}

fn load_keyvalues(path: &Option<PathBuf>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::load(p),
        None => Ok(KeyValues::default()),
    }
}

fn generator_config(args: &GenerateArgs) -> Result<GeneratorConfig> {
    let kv = load_keyvalues(&args.config)?;
    let mut cfg = config::generator_config(&kv)?;
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(widths) = &args.widths {
        config::set_widths(&mut cfg, widths)?;
    }
    if let Some(signals) = &args.signals {
        config::set_signals(&mut cfg, signals)?;
    }
    if let Some(v) = &args.marginals_ethnicity {
        cfg.ethnicity_marginals = parse_f64_list(v)?;
    }
    if let Some(v) = &args.marginals_insurance {
        cfg.insurance_marginals = parse_f64_list(v)?;
    }
    if let Some(v) = &args.marginals_age_bucket {
        cfg.age_marginals = parse_f64_list(v)?;
    }
    if let Some(v) = &args.prevalences {
        cfg.prevalences = parse_f64_list(v)?;
    }
    if !args.bias.is_empty() {
        cfg.bias = args
            .bias
            .iter()
            .map(|b| BiasSpec::parse(b).map_err(anyhow::Error::from))
            .collect::<Result<Vec<_>>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(opts: &TrainOpts) -> Result<TrainConfig> {
    let kv = load_keyvalues(&opts.config)?;
    let mut cfg = config::train_config(&kv)?;
    if let Some(mode) = &opts.mode {
        cfg.mode = FusionMode::parse(mode)?;
    }
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = opts.$field {
                cfg.$field = v;
            }
        };
    }
    set!(lambda);
    set!(gamma);
    set!(clip);
    set!(l1_alpha);
    set!(lr);
    set!(weight_decay);
    set!(beta1);
    set!(beta2);
    set!(eps);
    set!(batch_size);
    set!(patience);
    set!(max_epochs);
    set!(plateau_factor);
    set!(plateau_patience);
    set!(min_lr);
    set!(seed);
    set!(threshold);
    set!(proj_dim);
    set!(hidden_dim);
    set!(dropout);
    cfg.validate()?;
    Ok(cfg)
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad number '{v}'")))
        .collect()
}

fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| v.trim().parse::<u64>().with_context(|| format!("bad seed '{v}'")))
        .collect()
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(args) => {
            let cfg = generator_config(&args)?;
            let out = resolve_out(args.out.clone(), "cohort.jsonl")?;
            commands::generate(&cfg, &out)
        }
        Command::Train(args) => {
            let cfg = train_config(&args.opts)?;
            let out_dir = resolve_out(args.out_dir.clone(), "run")?;
            commands::train_cmd(&args.cohort, &cfg, &out_dir)
        }
        Command::Evaluate(args) => {
            let out = resolve_out(args.out.clone(), "report.json")?;
            commands::evaluate_cmd(&args.cohort, &args.checkpoint, &args.split, args.threshold, &out)
        }
        Command::Audit(args) => {
            let out = resolve_out(args.out.clone(), "report.json")?;
            commands::audit_cmd(&args.predictions, args.threshold, &out)
        }
        Command::Sweep(args) => {
            let cfg = train_config(&args.opts)?;
            let out = resolve_out(args.out.clone(), "sweep.csv")?;
            let seeds = parse_seed_list(&args.seeds)?;
            let (param, values) = match (&args.lambdas, &args.gammas) {
                (Some(l), None) => (SweepParam::Lambda, parse_f64_list(l)?),
                (None, Some(g)) => (SweepParam::Gamma, parse_f64_list(g)?),
                (Some(_), Some(_)) => bail!("usage: pass either --lambdas or --gammas, not both"),
                (None, None) => bail!("usage: pass --lambdas or --gammas"),
            };
            commands::sweep_cmd(&args.cohort, &cfg, param, &values, &seeds, &out)
        }
        Command::Ablate(args) => {
            let cfg = train_config(&args.opts)?;
            let out = resolve_out(args.out.clone(), "ablation.csv")?;
            let seeds = parse_seed_list(&args.seeds)?;
            let variants: Vec<String> = args
                .variants
                .as_deref()
                .map(|v| {
                    v.split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect()
                })
                .unwrap_or_default();
            commands::ablate_cmd(&args.cohort, &cfg, &variants, &seeds, &out)
        }
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
