//! Implementations of the six subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fame_core::cohort::{
    generate_cohort, load_cohort, split_cohort, write_cohort, AgeBucket, Cohort, Ethnicity,
    GeneratorConfig, Insurance, SensitiveAttributes, Split,
};
use fame_core::metrics::{fairness_report, FairnessReport, PredictionSet};
use fame_core::model::{FusionMode, DEMOGRAPHIC_MODALITY};
use fame_core::train::{
    evaluate as evaluate_state, export_predictions, load_checkpoint, save_checkpoint, train,
    TrainConfig, TrainOutcome,
};

use crate::manifest::{blob_hash, RunManifest};

pub fn generate(cfg: &GeneratorConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let cohort = generate_cohort(cfg)?;
    write_cohort(out, &cohort)?;
    let mut manifest = RunManifest::new("generate", serde_json::to_value(cfg)?);
    manifest.seed = Some(cfg.seed);
    manifest.cohort_hash = Some(blob_hash(out)?);
    manifest.record_output(out);
    manifest.duration_ms = start.elapsed().as_millis();
    manifest.write(&sibling_manifest(out))?;
    println!("wrote {} records to {}", cohort.len(), out.display());
    Ok(())
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Mean of the defined per-task values.
fn mean_defined(map: &BTreeMap<String, Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = map.values().filter_map(|v| *v).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub struct TrainedRun {
    pub outcome: TrainOutcome,
    pub report: FairnessReport,
    pub split: Split,
}

fn run_training(cohort: &Cohort, cfg: &TrainConfig) -> Result<TrainedRun> {
    let split = split_cohort(cohort, cfg.seed)?;
    let outcome = train(cohort, &split, cfg)?;
    for t in &outcome.degenerate_tasks {
        eprintln!(
            "warning: task {t} is single-class in the training split; its empty class got weight 0"
        );
    }
    let report = evaluate_state(&outcome.best, cohort, &split.test_ids, cfg.threshold)?;
    Ok(TrainedRun { outcome, report, split })
}

fn write_predictions_csv(
    path: &Path,
    pred: &PredictionSet,
    ids: &[String],
) -> Result<()> {
    let mut out = String::from("id,task,score,label,ethnicity,insurance,age_bucket\n");
    for (t, task) in pred.task_names.iter().enumerate() {
        for (i, id) in ids.iter().enumerate() {
            writeln!(
                out,
                "{id},{task},{},{},{},{},{}",
                pred.scores[t][i],
                pred.truth[t][i] as u8,
                pred.attrs[i].subgroup(fame_core::cohort::Attribute::Ethnicity),
                pred.attrs[i].subgroup(fame_core::cohort::Attribute::Insurance),
                pred.attrs[i].subgroup(fame_core::cohort::Attribute::AgeBucket),
            )
            .unwrap();
        }
    }
    std::fs::write(path, out)
        .with_context(|| format!("cannot write predictions {}", path.display()))?;
    Ok(())
}

pub fn train_cmd(cohort_path: &Path, cfg: &TrainConfig, out_dir: &Path) -> Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let cohort = load_cohort(cohort_path)?;
    let run = run_training(&cohort, cfg)?;

    let checkpoint = out_dir.join("checkpoint.json");
    save_checkpoint(&checkpoint, &run.outcome.best)?;
    let trajectory = out_dir.join("trajectory.csv");
    std::fs::write(&trajectory, run.outcome.trajectory.to_csv())?;
    let metrics = out_dir.join("metrics.json");
    std::fs::write(&metrics, run.report.to_json()?)?;
    let predictions = out_dir.join("predictions.csv");
    let pred =
        export_predictions(&run.outcome.best, &cohort, &run.split.test_ids, cfg.threshold)?;
    write_predictions_csv(&predictions, &pred, &run.split.test_ids)?;

    let mut manifest = RunManifest::new("train", serde_json::to_value(cfg)?);
    manifest.seed = Some(cfg.seed);
    manifest.cohort_hash = Some(blob_hash(cohort_path)?);
    for p in [&checkpoint, &trajectory, &metrics, &predictions] {
        manifest.record_output(p);
    }
    manifest.duration_ms = start.elapsed().as_millis();
    manifest.write(&out_dir.join("manifest.json"))?;

    println!(
        "trained {} for {} epochs (best epoch {}, val loss {:.6})",
        cfg.mode, run.outcome.epochs_run, run.outcome.best_epoch, run.outcome.best_val_loss
    );
    println!(
        "test: auroc {} auprc {} eddi {:.6} eo {}",
        csv_opt(mean_defined(&run.report.auroc)),
        csv_opt(mean_defined(&run.report.auprc)),
        run.report.eddi_overall,
        csv_opt(run.report.eo_overall),
    );
    Ok(())
}

pub fn evaluate_cmd(
    cohort_path: &Path,
    checkpoint: &Path,
    which: &str,
    threshold: f64,
    out: &Path,
) -> Result<()> {
    let start = Instant::now();
    let cohort = load_cohort(cohort_path)?;
    let state = load_checkpoint(checkpoint)?;
    let split = split_cohort(&cohort, state.seed)?;
    let ids: Vec<String> = match which {
        "test" => split.test_ids,
        "val" => split.val_ids,
        "train" => split.train_ids,
        "all" => cohort.records.iter().map(|r| r.id.clone()).collect(),
        other => bail!("unknown split '{other}' (expected test, val, train, or all)"),
    };
    let report = evaluate_state(&state, &cohort, &ids, threshold)?;
    std::fs::write(out, report.to_json()?)?;

    let mut manifest = RunManifest::new(
        "evaluate",
        serde_json::json!({ "checkpoint": checkpoint.display().to_string(), "split": which, "threshold": threshold }),
    );
    manifest.cohort_hash = Some(blob_hash(cohort_path)?);
    manifest.record_output(out);
    manifest.duration_ms = start.elapsed().as_millis();
    manifest.write(&sibling_manifest(out))?;
    println!("wrote report for {} ids to {}", ids.len(), out.display());
    Ok(())
}

fn parse_attr_value<T: Copy>(
    all: &[T],
    label_of: impl Fn(&T) -> &'static str,
    value: &str,
    line: usize,
    what: &str,
) -> Result<T> {
    all.iter()
        .find(|v| label_of(v) == value)
        .copied()
        .with_context(|| format!("predictions line {line}: unknown {what} '{value}'"))
}

/// Parse a predictions CSV (id,task,score,label,ethnicity,insurance,age_bucket)
/// back into a prediction set.
pub fn parse_predictions(text: &str, threshold: f64) -> Result<PredictionSet> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().context("predictions file is empty")?;
    if header.trim() != "id,task,score,label,ethnicity,insurance,age_bucket" {
        bail!("predictions line 1: unexpected header '{header}'");
    }
    struct TaskRows {
        ids: Vec<String>,
        scores: Vec<f64>,
        labels: Vec<bool>,
        attrs: Vec<SensitiveAttributes>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut tasks: BTreeMap<String, TaskRows> = BTreeMap::new();
    for (idx, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            bail!("predictions line {lineno}: expected 7 fields, found {}", fields.len());
        }
        let score: f64 = fields[2]
            .parse()
            .with_context(|| format!("predictions line {lineno}: bad score '{}'", fields[2]))?;
        if !(0.0..=1.0).contains(&score) {
            bail!("predictions line {lineno}: score {score} outside [0, 1]");
        }
        let label = match fields[3] {
            "0" => false,
            "1" => true,
            other => bail!("predictions line {lineno}: bad label '{other}'"),
        };
        let attrs = SensitiveAttributes {
            ethnicity: parse_attr_value(
                &Ethnicity::ALL,
                Ethnicity::label,
                fields[4],
                lineno,
                "ethnicity",
            )?,
            insurance: parse_attr_value(
                &Insurance::ALL,
                Insurance::label,
                fields[5],
                lineno,
                "insurance",
            )?,
            age_bucket: parse_attr_value(
                &AgeBucket::ALL,
                AgeBucket::label,
                fields[6],
                lineno,
                "age_bucket",
            )?,
        };
        let task = fields[1].to_string();
        let entry = tasks.entry(task.clone()).or_insert_with(|| {
            order.push(task);
            TaskRows { ids: Vec::new(), scores: Vec::new(), labels: Vec::new(), attrs: Vec::new() }
        });
        entry.ids.push(fields[0].to_string());
        entry.scores.push(score);
        entry.labels.push(label);
        entry.attrs.push(attrs);
    }
    if order.is_empty() {
        bail!("predictions file holds no rows");
    }
    let first = &tasks[&order[0]];
    for name in &order {
        let rows = &tasks[name];
        if rows.ids != first.ids {
            bail!("task '{name}' covers a different id sequence than task '{}'", order[0]);
        }
        if rows.attrs != first.attrs {
            bail!("task '{name}' disagrees on sensitive attributes");
        }
    }
    let scores: Vec<Vec<f64>> = order.iter().map(|t| tasks[t].scores.clone()).collect();
    let truth: Vec<Vec<bool>> = order.iter().map(|t| tasks[t].labels.clone()).collect();
    Ok(PredictionSet::from_scores(order, scores, truth, first.attrs.clone(), threshold)?)
}

pub fn audit_cmd(predictions: &Path, threshold: f64, out: &Path) -> Result<()> {
    let start = Instant::now();
    let text = std::fs::read_to_string(predictions)
        .with_context(|| format!("cannot read predictions {}", predictions.display()))?;
    let pred = parse_predictions(&text, threshold)?;
    let report = fairness_report(&pred)?;
    std::fs::write(out, report.to_json()?)?;

    let mut manifest = RunManifest::new(
        "audit",
        serde_json::json!({ "predictions": predictions.display().to_string(), "threshold": threshold }),
    );
    manifest.record_output(out);
    manifest.duration_ms = start.elapsed().as_millis();
    manifest.write(&sibling_manifest(out))?;
    println!(
        "audited {} samples x {} tasks: eddi {:.6} eo {}",
        pred.samples(),
        pred.tasks(),
        report.eddi_overall,
        csv_opt(report.eo_overall),
    );
    Ok(())
}

pub enum SweepParam {
    Lambda,
    Gamma,
}

impl SweepParam {
    fn name(&self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
        }
    }

    fn apply(&self, cfg: &mut TrainConfig, value: f64) {
        match self {
            SweepParam::Lambda => cfg.lambda = value,
            SweepParam::Gamma => cfg.gamma = value,
        }
    }
}

pub fn sweep_cmd(
    cohort_path: &Path,
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    out: &Path,
) -> Result<()> {
    if values.is_empty() {
        bail!("usage: sweep needs at least one {} value", param.name());
    }
    if seeds.is_empty() {
        bail!("usage: sweep needs at least one seed");
    }
    let start = Instant::now();
    let cohort = load_cohort(cohort_path)?;
    let mut csv = String::from("param,value,seed,auprc,eddi,eo\n");
    let mut summaries = String::new();
    for &value in values {
        let mut auprcs = Vec::new();
        let mut eddis = Vec::new();
        let mut eos = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            param.apply(&mut cfg, value);
            cfg.validate()?;
            let run = run_training(&cohort, &cfg)?;
            let auprc = mean_defined(&run.report.auprc);
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                param.name(),
                value,
                seed,
                csv_opt(auprc),
                run.report.eddi_overall,
                csv_opt(run.report.eo_overall),
            )
            .unwrap();
            if let Some(v) = auprc {
                auprcs.push(v);
            }
            eddis.push(run.report.eddi_overall);
            if let Some(v) = run.report.eo_overall {
                eos.push(v);
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        writeln!(
            summaries,
            "{},{},mean,{},{},{}",
            param.name(),
            value,
            csv_opt(mean(&auprcs)),
            csv_opt(mean(&eddis)),
            csv_opt(mean(&eos)),
        )
        .unwrap();
    }
    csv.push_str(&summaries);
    std::fs::write(out, csv)?;

    let mut manifest = RunManifest::new(
        "sweep",
        serde_json::json!({
            "base": serde_json::to_value(base)?,
            "param": param.name(),
            "values": values,
            "seeds": seeds,
        }),
    );
    manifest.cohort_hash = Some(blob_hash(cohort_path)?);
    manifest.record_output(out);
    manifest.duration_ms = start.elapsed().as_millis();
    manifest.write(&sibling_manifest(out))?;
    println!(
        "swept {} over {} values x {} seeds -> {}",
        param.name(),
        values.len(),
        seeds.len(),
        out.display()
    );
    Ok(())
}

const UNIMODAL_PREFIX: &str = "unimodal_";

/// Ablation variant list for a cohort: the five fusion modes plus one
/// unimodal run per non-demographic modality.
pub fn default_variants(cohort: &Cohort) -> Vec<String> {
    let mut variants: Vec<String> =
        FusionMode::ALL.iter().map(|m| m.as_str().to_string()).collect();
    for m in &cohort.schema.modalities {
        if m.name != DEMOGRAPHIC_MODALITY {
            variants.push(format!("{UNIMODAL_PREFIX}{}", m.name));
        }
    }
    variants
}

fn run_variant(cohort: &Cohort, base: &TrainConfig, variant: &str, seed: u64) -> Result<TrainedRun> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    if let Some(modality) = variant.strip_prefix(UNIMODAL_PREFIX) {
        let projected = cohort.project(&[modality])?;
        cfg.mode = FusionMode::Average;
        run_training(&projected, &cfg)
    } else {
        cfg.mode = FusionMode::parse(variant)?;
        run_training(cohort, &cfg)
    }
}

pub fn ablate_cmd(
    cohort_path: &Path,
    base: &TrainConfig,
    variants: &[String],
    seeds: &[u64],
    out: &Path,
) -> Result<()> {
    if seeds.is_empty() {
        bail!("usage: ablate needs at least one seed");
    }
    let start = Instant::now();
    let cohort = load_cohort(cohort_path)?;
    let variants: Vec<String> =
        if variants.is_empty() { default_variants(&cohort) } else { variants.to_vec() };

    let mut csv = String::from("variant,auroc,auprc,eddi,eo\n");
    for variant in &variants {
        let mut aurocs = Vec::new();
        let mut auprcs = Vec::new();
        let mut eddis = Vec::new();
        let mut eos = Vec::new();
        for &seed in seeds {
            let run = run_variant(&cohort, base, variant, seed)?;
            if let Some(v) = mean_defined(&run.report.auroc) {
                aurocs.push(v);
            }
            if let Some(v) = mean_defined(&run.report.auprc) {
                auprcs.push(v);
            }
            eddis.push(run.report.eddi_overall);
            if let Some(v) = run.report.eo_overall {
                eos.push(v);
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        writeln!(
            csv,
            "{variant},{},{},{},{}",
            csv_opt(mean(&aurocs)),
            csv_opt(mean(&auprcs)),
            csv_opt(mean(&eddis)),
            csv_opt(mean(&eos)),
        )
        .unwrap();
    }
    std::fs::write(out, &csv)?;

    let mut manifest = RunManifest::new(
        "ablate",
        serde_json::json!({
            "base": serde_json::to_value(base)?,
            "variants": variants,
            "seeds": seeds,
        }),
    );
    manifest.cohort_hash = Some(blob_hash(cohort_path)?);
    manifest.record_output(out);
    manifest.duration_ms = start.elapsed().as_millis();
    manifest.write(&sibling_manifest(out))?;
    println!("ablated {} variants x {} seeds -> {}", variants.len(), seeds.len(), out.display());
    Ok(())
}
