//! Performance and fairness metrics: error rates, sign-agnostic disparity
//! aggregation, equalized-odds gaps, AUROC, AUPRC, and the combined report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cohort::{Attribute, SensitiveAttributes};
use crate::error::{Error, Result};

/// Scores, thresholded labels, ground truth, and sensitive attributes for a
/// set of samples across tasks.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    pub task_names: Vec<String>,
    /// `scores[task][sample]`, probabilities in [0, 1].
    pub scores: Vec<Vec<f64>>,
    pub hard: Vec<Vec<bool>>,
    pub truth: Vec<Vec<bool>>,
    pub attrs: Vec<SensitiveAttributes>,
    pub threshold: f64,
}

impl PredictionSet {
    /// Build from scores; hard labels are `score >= threshold`.
    pub fn from_scores(
        task_names: Vec<String>,
        scores: Vec<Vec<f64>>,
        truth: Vec<Vec<bool>>,
        attrs: Vec<SensitiveAttributes>,
        threshold: f64,
    ) -> Result<Self> {
        if scores.len() != task_names.len() || truth.len() != task_names.len() {
            return Err(Error::input(format!(
                "prediction set: {} tasks but {} score and {} truth columns",
                task_names.len(),
                scores.len(),
                truth.len()
            )));
        }
        let n = attrs.len();
        if n == 0 {
            return Err(Error::input("empty prediction set".to_string()));
        }
        for (t, col) in scores.iter().enumerate() {
            if col.len() != n || truth[t].len() != n {
                return Err(Error::input(format!(
                    "prediction set: task {t} has {} scores / {} labels for {n} samples",
                    col.len(),
                    truth[t].len()
                )));
            }
            if col.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(Error::input(format!("task {t} has a score outside [0, 1]")));
            }
        }
        let hard = scores
            .iter()
            .map(|col| col.iter().map(|s| *s >= threshold).collect())
            .collect();
        Ok(PredictionSet { task_names, scores, hard, truth, attrs, threshold })
    }

    pub fn samples(&self) -> usize {
        self.attrs.len()
    }

    pub fn tasks(&self) -> usize {
        self.task_names.len()
    }
}

/// Overall error rate plus per-subgroup error rates for one attribute and
/// task. Subgroups without samples are omitted.
pub fn error_rates(
    pred: &PredictionSet,
    attr: Attribute,
    task: usize,
) -> Result<(f64, Vec<(&'static str, f64)>)> {
    let n = pred.samples();
    if n == 0 {
        return Err(Error::input("empty prediction set".to_string()));
    }
    let hard = &pred.hard[task];
    let truth = &pred.truth[task];
    let wrong_total = hard.iter().zip(truth).filter(|(h, y)| h != y).count();
    let oer = wrong_total as f64 / n as f64;

    let mut per_subgroup = Vec::new();
    for sub in attr.subgroups() {
        let mut count = 0usize;
        let mut wrong = 0usize;
        for i in 0..n {
            if pred.attrs[i].subgroup(attr) == sub {
                count += 1;
                if hard[i] != truth[i] {
                    wrong += 1;
                }
            }
        }
        if count > 0 {
            per_subgroup.push((sub, wrong as f64 / count as f64));
        }
    }
    Ok((oer, per_subgroup))
}

/// Normalized deviation of one subgroup's error rate from the overall rate;
/// the denominator max(OER, 1-OER) is never below one half.
pub fn eddi_subgroup(er_s: f64, oer: f64) -> f64 {
    (er_s - oer) / oer.max(1.0 - oer)
}

/// Sign-agnostic aggregation: root of the sum of squares over subgroups,
/// divided by the number of contributing subgroups.
pub fn eddi_attribute(eddi_s: &[f64]) -> Result<f64> {
    if eddi_s.is_empty() {
        return Err(Error::input("eddi aggregation over zero subgroups".to_string()));
    }
    let sum_sq: f64 = eddi_s.iter().map(|d| d * d).sum();
    Ok(sum_sq.sqrt() / eddi_s.len() as f64)
}

/// Signed arithmetic mean across subgroups, kept for comparison output only;
/// opposite-sign disparities cancel here.
pub fn eddi_mean_legacy(eddi_s: &[f64]) -> Result<f64> {
    if eddi_s.is_empty() {
        return Err(Error::input("eddi aggregation over zero subgroups".to_string()));
    }
    Ok(eddi_s.iter().sum::<f64>() / eddi_s.len() as f64)
}

fn pairwise_mean_abs_diff(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..values.len() {
        for j in (i + 1)..values.len() {
            total += (values[i] - values[j]).abs();
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

/// Equalized-odds style gap: mean pairwise |TPR| and |FPR| differences across
/// subgroups, averaged. Subgroups without positives (negatives) are excluded
/// from the TPR (FPR) pairs; `None` when neither rate has two eligible
/// subgroups.
pub fn equalized_odds_gap(
    pred: &PredictionSet,
    attr: Attribute,
    task: usize,
) -> Result<Option<f64>> {
    if pred.samples() == 0 {
        return Err(Error::input("empty prediction set".to_string()));
    }
    let hard = &pred.hard[task];
    let truth = &pred.truth[task];
    let mut tprs = Vec::new();
    let mut fprs = Vec::new();
    for sub in attr.subgroups() {
        let mut tp = 0usize;
        let mut fn_ = 0usize;
        let mut fp = 0usize;
        let mut tn = 0usize;
        for i in 0..pred.samples() {
            if pred.attrs[i].subgroup(attr) != sub {
                continue;
            }
            match (hard[i], truth[i]) {
                (true, true) => tp += 1,
                (false, true) => fn_ += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
            }
        }
        if tp + fn_ > 0 {
            tprs.push(tp as f64 / (tp + fn_) as f64);
        }
        if fp + tn > 0 {
            fprs.push(fp as f64 / (fp + tn) as f64);
        }
    }
    let tpr_agg = pairwise_mean_abs_diff(&tprs);
    let fpr_agg = pairwise_mean_abs_diff(&fprs);
    Ok(match (tpr_agg, fpr_agg) {
        (Some(t), Some(f)) => Some((t + f) / 2.0),
        (Some(t), None) => Some(t),
        (None, Some(f)) => Some(f),
        (None, None) => None,
    })
}

/// Mann-Whitney AUROC: probability a positive outranks a negative, ties at
/// half credit. `None` when truth is single-class.
pub fn auroc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let np = truth.iter().filter(|t| **t).count();
    let nn = truth.len() - np;
    if np == 0 || nn == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // average 1-based rank of the tie group
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if truth[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (np * (np + 1)) as f64 / 2.0;
    Some(u / (np as f64 * nn as f64))
}

/// Average precision with step interpolation over descending score
/// thresholds; tied scores form a single threshold group. `None` without
/// positives.
pub fn auprc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let np = truth.iter().filter(|t| **t).count();
    if np == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mut gtp = 0usize;
        let mut gfp = 0usize;
        for &k in &idx[i..=j] {
            if truth[k] {
                gtp += 1;
            } else {
                gfp += 1;
            }
        }
        tp += gtp;
        fp += gfp;
        if gtp > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (gtp as f64 / np as f64) * precision;
        }
        i = j + 1;
    }
    Some(ap)
}

/// Task-averaged statistics for one subgroup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupStats {
    pub eddi: f64,
    pub error_rate: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

/// Task-averaged disparity values for one sensitive attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    /// Sign-agnostic aggregate.
    pub value: f64,
    /// Signed-mean aggregate, for comparison.
    pub legacy: f64,
    pub subgroups: BTreeMap<String, SubgroupStats>,
}

/// Per-task slice of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFairness {
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub eddi: BTreeMap<String, f64>,
    pub eo: BTreeMap<String, Option<f64>>,
    pub eddi_overall: f64,
    pub eo_overall: Option<f64>,
}

/// Full fairness and performance report for a prediction set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub threshold: f64,
    pub tasks: Vec<String>,
    pub auroc: BTreeMap<String, Option<f64>>,
    pub auprc: BTreeMap<String, Option<f64>>,
    pub eddi: BTreeMap<String, AttributeReport>,
    pub eo: BTreeMap<String, Option<f64>>,
    pub eddi_overall: f64,
    pub eo_overall: Option<f64>,
    pub eddi_legacy: f64,
    pub per_task: BTreeMap<String, TaskFairness>,
}

impl FairnessReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean_of_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

struct SubgroupSlice {
    name: &'static str,
    eddi: f64,
    error_rate: f64,
    tpr: Option<f64>,
    fpr: Option<f64>,
}

struct TaskAttribute {
    eddi: f64,
    legacy: f64,
    eo: Option<f64>,
    subgroups: Vec<SubgroupSlice>,
}

fn analyze_task_attribute(
    pred: &PredictionSet,
    attr: Attribute,
    task: usize,
) -> Result<TaskAttribute> {
    let (oer, per_subgroup) = error_rates(pred, attr, task)?;
    let eddi_values: Vec<f64> =
        per_subgroup.iter().map(|(_, er)| eddi_subgroup(*er, oer)).collect();
    let eddi = eddi_attribute(&eddi_values)?;
    let legacy = eddi_mean_legacy(&eddi_values)?;
    let eo = equalized_odds_gap(pred, attr, task)?;

    let hard = &pred.hard[task];
    let truth = &pred.truth[task];
    let mut subgroups = Vec::new();
    for ((sub, er), d) in per_subgroup.iter().zip(&eddi_values) {
        let mut tp = 0usize;
        let mut fn_ = 0usize;
        let mut fp = 0usize;
        let mut tn = 0usize;
        for i in 0..pred.samples() {
            if pred.attrs[i].subgroup(attr) != *sub {
                continue;
            }
            match (hard[i], truth[i]) {
                (true, true) => tp += 1,
                (false, true) => fn_ += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
            }
        }
        let tpr = if tp + fn_ > 0 { Some(tp as f64 / (tp + fn_) as f64) } else { None };
        let fpr = if fp + tn > 0 { Some(fp as f64 / (fp + tn) as f64) } else { None };
        subgroups.push(SubgroupSlice { name: sub, eddi: *d, error_rate: *er, tpr, fpr });
    }
    Ok(TaskAttribute { eddi, legacy, eo, subgroups })
}

/// Overall sign-agnostic disparity: mean over attributes of the per-attribute
/// aggregate, itself averaged over tasks. Returns the overall value plus the
/// per-attribute task-averaged breakdown.
pub fn eddi_overall(pred: &PredictionSet) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut per_attr = BTreeMap::new();
    let mut total = 0.0;
    for attr in Attribute::ALL {
        let mut sum = 0.0;
        for task in 0..pred.tasks() {
            sum += analyze_task_attribute(pred, attr, task)?.eddi;
        }
        let mean = sum / pred.tasks() as f64;
        per_attr.insert(attr.name().to_string(), mean);
        total += mean;
    }
    Ok((total / Attribute::ALL.len() as f64, per_attr))
}

/// Compute the full report for a prediction set.
pub fn fairness_report(pred: &PredictionSet) -> Result<FairnessReport> {
    if pred.samples() == 0 {
        return Err(Error::input("empty prediction set".to_string()));
    }
    let tasks = pred.task_names.clone();
    let t_count = pred.tasks();

    let mut auroc_map = BTreeMap::new();
    let mut auprc_map = BTreeMap::new();
    let mut per_task = BTreeMap::new();

    // per (attr, task) analyses
    let mut analyses: Vec<Vec<TaskAttribute>> = Vec::new();
    for attr in Attribute::ALL {
        let mut row = Vec::new();
        for task in 0..t_count {
            row.push(analyze_task_attribute(pred, attr, task)?);
        }
        analyses.push(row);
    }

    for (t, name) in tasks.iter().enumerate() {
        let truth: Vec<bool> = pred.truth[t].clone();
        let roc = auroc(&pred.scores[t], &truth);
        let pr = auprc(&pred.scores[t], &truth);
        auroc_map.insert(name.clone(), roc);
        auprc_map.insert(name.clone(), pr);

        let mut eddi_map = BTreeMap::new();
        let mut eo_map = BTreeMap::new();
        let mut eddi_sum = 0.0;
        let mut eos = Vec::new();
        for (a, attr) in Attribute::ALL.iter().enumerate() {
            let analysis = &analyses[a][t];
            eddi_map.insert(attr.name().to_string(), analysis.eddi);
            eo_map.insert(attr.name().to_string(), analysis.eo);
            eddi_sum += analysis.eddi;
            eos.push(analysis.eo);
        }
        per_task.insert(
            name.clone(),
            TaskFairness {
                auroc: roc,
                auprc: pr,
                eddi: eddi_map,
                eo: eo_map,
                eddi_overall: eddi_sum / Attribute::ALL.len() as f64,
                eo_overall: mean_of_defined(&eos),
            },
        );
    }

    let mut eddi_attr_map = BTreeMap::new();
    let mut eo_attr_map = BTreeMap::new();
    let mut eddi_total = 0.0;
    let mut legacy_total = 0.0;
    let mut attr_eos = Vec::new();
    for (a, attr) in Attribute::ALL.iter().enumerate() {
        let row = &analyses[a];
        let value = row.iter().map(|x| x.eddi).sum::<f64>() / t_count as f64;
        let legacy = row.iter().map(|x| x.legacy).sum::<f64>() / t_count as f64;
        let eo = mean_of_defined(&row.iter().map(|x| x.eo).collect::<Vec<_>>());

        // task-averaged subgroup stats; a subgroup's presence does not vary
        // by task, so the plain mean is well defined
        let mut subgroups: BTreeMap<String, SubgroupStats> = BTreeMap::new();
        let observed: Vec<&'static str> = row[0].subgroups.iter().map(|s| s.name).collect();
        for (s_idx, sub) in observed.iter().enumerate() {
            let mut eddi_sum = 0.0;
            let mut er_sum = 0.0;
            let mut tprs = Vec::new();
            let mut fprs = Vec::new();
            for task_row in row {
                let slice = &task_row.subgroups[s_idx];
                eddi_sum += slice.eddi;
                er_sum += slice.error_rate;
                tprs.push(slice.tpr);
                fprs.push(slice.fpr);
            }
            subgroups.insert(
                sub.to_string(),
                SubgroupStats {
                    eddi: eddi_sum / t_count as f64,
                    error_rate: er_sum / t_count as f64,
                    tpr: mean_of_defined(&tprs),
                    fpr: mean_of_defined(&fprs),
                },
            );
        }

        eddi_attr_map.insert(attr.name().to_string(), AttributeReport { value, legacy, subgroups });
        eo_attr_map.insert(attr.name().to_string(), eo);
        eddi_total += value;
        legacy_total += legacy;
        attr_eos.push(eo);
    }

    Ok(FairnessReport {
        threshold: pred.threshold,
        tasks,
        auroc: auroc_map,
        auprc: auprc_map,
        eddi: eddi_attr_map,
        eo: eo_attr_map,
        eddi_overall: eddi_total / Attribute::ALL.len() as f64,
        eo_overall: mean_of_defined(&attr_eos),
        eddi_legacy: legacy_total / Attribute::ALL.len() as f64,
        per_task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{AgeBucket, Ethnicity, Insurance};

    fn attrs_of(ethnicities: &[Ethnicity]) -> Vec<SensitiveAttributes> {
        ethnicities
            .iter()
            .map(|e| SensitiveAttributes {
                ethnicity: *e,
                insurance: Insurance::Medicare,
                age_bucket: AgeBucket::Age70Plus,
            })
            .collect()
    }

    #[test]
    fn error_rates_counting_example() {
        // 10 samples, 2 wrong; subgroup Black holds both wrongs among its 4
        let mut truth = vec![true; 10];
        let mut scores = vec![1.0; 10];
        // samples 0..4 are Black, rest White; samples 0 and 1 are wrong
        scores[0] = 0.0;
        scores[1] = 0.0;
        truth[0] = true;
        truth[1] = true;
        let eth: Vec<Ethnicity> = (0..10)
            .map(|i| if i < 4 { Ethnicity::Black } else { Ethnicity::White })
            .collect();
        let pred = PredictionSet::from_scores(
            vec!["mortality".into()],
            vec![scores],
            vec![truth],
            attrs_of(&eth),
            0.5,
        )
        .unwrap();
        let (oer, subs) = error_rates(&pred, Attribute::Ethnicity, 0).unwrap();
        assert!((oer - 0.2).abs() < 1e-15);
        let black = subs.iter().find(|(s, _)| *s == "Black").unwrap().1;
        assert!((black - 0.5).abs() < 1e-15);
        let white = subs.iter().find(|(s, _)| *s == "White").unwrap().1;
        assert_eq!(white, 0.0);
    }

    #[test]
    fn error_rates_all_correct_and_single_subgroup() {
        let pred = PredictionSet::from_scores(
            vec!["mortality".into()],
            vec![vec![0.9, 0.1, 0.8]],
            vec![vec![true, false, true]],
            attrs_of(&[Ethnicity::White, Ethnicity::White, Ethnicity::White]),
            0.5,
        )
        .unwrap();
        let (oer, subs) = error_rates(&pred, Attribute::Ethnicity, 0).unwrap();
        assert_eq!(oer, 0.0);
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].1, oer);
    }

    #[test]
    fn eddi_subgroup_examples() {
        assert_eq!(eddi_subgroup(0.3, 0.3), 0.0);
        assert!((eddi_subgroup(0.3, 0.2) - 0.125).abs() < 1e-12);
        assert!((eddi_subgroup(0.45, 0.6) + 0.25).abs() < 1e-12);
    }

    #[test]
    fn eddi_attribute_examples() {
        assert_eq!(eddi_attribute(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((eddi_attribute(&[0.3, -0.3]).unwrap() - 0.212132034355964).abs() < 1e-12);
        assert!((eddi_attribute(&[0.125, -0.25, 0.0625]).unwrap() - 0.09547032697824666).abs()
            < 1e-12);
        assert!(eddi_attribute(&[]).is_err());
    }

    #[test]
    fn eddi_legacy_examples() {
        assert_eq!(eddi_mean_legacy(&[0.3, -0.3]).unwrap(), 0.0);
        assert_eq!(eddi_mean_legacy(&[0.125]).unwrap(), 0.125);
        assert!((eddi_mean_legacy(&[0.1, 0.2, 0.3]).unwrap() - 0.2).abs() < 1e-15);
        assert!(eddi_mean_legacy(&[]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), Some(1.0));
        assert_eq!(auroc(&[0.9, 0.6, 0.4, 0.2], &[true, false, true, false]), Some(0.75));
        assert_eq!(auroc(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]), Some(0.5));
        assert_eq!(auroc(&[0.5, 0.5], &[true, true]), None);
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), Some(1.0));
        let v = auprc(&[0.9, 0.6, 0.4, 0.2], &[true, false, true, false]).unwrap();
        assert!((v - (0.5 + 0.5 * (2.0 / 3.0))).abs() < 1e-15);
        assert_eq!(auprc(&[0.5, 0.2], &[false, false]), None);
    }

    #[test]
    fn eo_examples() {
        // identical confusion rates across subgroups -> 0
        let pred = PredictionSet::from_scores(
            vec!["t".into()],
            vec![vec![0.9, 0.1, 0.9, 0.1]],
            vec![vec![true, false, true, false]],
            attrs_of(&[Ethnicity::White, Ethnicity::White, Ethnicity::Black, Ethnicity::Black]),
            0.5,
        )
        .unwrap();
        assert_eq!(equalized_odds_gap(&pred, Attribute::Ethnicity, 0).unwrap(), Some(0.0));
        // insurance is single-subgroup here: no pairs on either rate
        assert_eq!(equalized_odds_gap(&pred, Attribute::Insurance, 0).unwrap(), None);
    }

    #[test]
    fn report_on_perfect_predictions_is_zero_disparity() {
        let pred = PredictionSet::from_scores(
            vec!["t".into()],
            vec![vec![0.9, 0.1, 0.9, 0.1]],
            vec![vec![true, false, true, false]],
            attrs_of(&[Ethnicity::White, Ethnicity::Black, Ethnicity::Black, Ethnicity::White]),
            0.5,
        )
        .unwrap();
        let report = fairness_report(&pred).unwrap();
        assert_eq!(report.eddi_overall, 0.0);
        assert_eq!(report.eo_overall, Some(0.0));
        assert_eq!(report.auroc["t"], Some(1.0));
    }

    #[test]
    fn report_json_round_trip() {
        let pred = PredictionSet::from_scores(
            vec!["t".into()],
            vec![vec![0.9, 0.4, 0.7, 0.1]],
            vec![vec![true, true, false, false]],
            attrs_of(&[Ethnicity::White, Ethnicity::Black, Ethnicity::Black, Ethnicity::White]),
            0.5,
        )
        .unwrap();
        let report = fairness_report(&pred).unwrap();
        let json = report.to_json().unwrap();
        let parsed: FairnessReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, parsed);
    }
}
