//! Multimodal patient records: schema, JSONL ingestion, deterministic
//! splitting, and a synthetic generator with subgroup bias injection.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TASKS: [&str; 3] = ["mortality", "los_ge_7", "mech_vent"];

/// Task names for a cohort with `t` label columns. The three-task layout is
/// fixed as [mortality, los_ge_7, mech_vent]; other counts get positional
/// names.
pub fn task_names(t: usize) -> Vec<String> {
    if t == DEFAULT_TASKS.len() {
        DEFAULT_TASKS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..t).map(|i| format!("task{i}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ethnicity {
    White,
    Black,
    Hispanic,
    Asian,
    Other,
}

impl Ethnicity {
    pub const ALL: [Ethnicity; 5] = [
        Ethnicity::White,
        Ethnicity::Black,
        Ethnicity::Hispanic,
        Ethnicity::Asian,
        Ethnicity::Other,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Ethnicity::White => "White",
            Ethnicity::Black => "Black",
            Ethnicity::Hispanic => "Hispanic",
            Ethnicity::Asian => "Asian",
            Ethnicity::Other => "Other",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Insurance {
    Medicare,
    Private,
    Medicaid,
    Government,
    SelfPay,
}

impl Insurance {
    pub const ALL: [Insurance; 5] = [
        Insurance::Medicare,
        Insurance::Private,
        Insurance::Medicaid,
        Insurance::Government,
        Insurance::SelfPay,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Insurance::Medicare => "Medicare",
            Insurance::Private => "Private",
            Insurance::Medicaid => "Medicaid",
            Insurance::Government => "Government",
            Insurance::SelfPay => "SelfPay",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgeBucket {
    #[serde(rename = "15-29")]
    Age15To29,
    #[serde(rename = "30-49")]
    Age30To49,
    #[serde(rename = "50-69")]
    Age50To69,
    #[serde(rename = "70+")]
    Age70Plus,
}

impl AgeBucket {
    pub const ALL: [AgeBucket; 4] = [
        AgeBucket::Age15To29,
        AgeBucket::Age30To49,
        AgeBucket::Age50To69,
        AgeBucket::Age70Plus,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AgeBucket::Age15To29 => "15-29",
            AgeBucket::Age30To49 => "30-49",
            AgeBucket::Age50To69 => "50-69",
            AgeBucket::Age70Plus => "70+",
        }
    }
}

/// The three sensitive attributes fairness is assessed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Attribute {
    Ethnicity,
    Insurance,
    AgeBucket,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Ethnicity, Attribute::Insurance, Attribute::AgeBucket];

    pub fn name(&self) -> &'static str {
        match self {
            Attribute::Ethnicity => "ethnicity",
            Attribute::Insurance => "insurance",
            Attribute::AgeBucket => "age_bucket",
        }
    }

    pub fn parse(s: &str) -> Result<Attribute> {
        match s {
            "ethnicity" => Ok(Attribute::Ethnicity),
            "insurance" => Ok(Attribute::Insurance),
            "age_bucket" => Ok(Attribute::AgeBucket),
            other => Err(Error::config(format!("unknown sensitive attribute '{other}'"))),
        }
    }

    /// Subgroup labels in canonical order.
    pub fn subgroups(&self) -> Vec<&'static str> {
        match self {
            Attribute::Ethnicity => Ethnicity::ALL.iter().map(|e| e.label()).collect(),
            Attribute::Insurance => Insurance::ALL.iter().map(|i| i.label()).collect(),
            Attribute::AgeBucket => AgeBucket::ALL.iter().map(|a| a.label()).collect(),
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SensitiveAttributes {
    pub ethnicity: Ethnicity,
    pub insurance: Insurance,
    pub age_bucket: AgeBucket,
}

impl SensitiveAttributes {
    /// Subgroup label of this record for the given attribute.
    pub fn subgroup(&self, attr: Attribute) -> &'static str {
        match attr {
            Attribute::Ethnicity => self.ethnicity.label(),
            Attribute::Insurance => self.insurance.label(),
            Attribute::AgeBucket => self.age_bucket.label(),
        }
    }
}

/// One patient: per-modality embeddings, binary task labels, sensitive
/// attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub id: String,
    pub attrs: SensitiveAttributes,
    pub labels: Vec<u8>,
    pub modalities: IndexMap<String, Vec<f64>>,
}

/// Modality name plus embedding width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDef {
    pub name: String,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CohortSchema {
    pub modalities: Vec<ModalityDef>,
    pub task_count: usize,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub schema: CohortSchema,
    pub records: Vec<CohortRecord>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn task_names(&self) -> Vec<String> {
        task_names(self.schema.task_count)
    }

    /// Index from record id to position.
    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    /// A copy of the cohort restricted to the named modalities, preserving
    /// their order. Used for unimodal ablations.
    pub fn project(&self, keep: &[&str]) -> Result<Cohort> {
        let mut modalities = Vec::new();
        for name in keep {
            let def = self
                .schema
                .modalities
                .iter()
                .find(|m| m.name == *name)
                .ok_or_else(|| Error::config(format!("unknown modality '{name}'")))?;
            modalities.push(def.clone());
        }
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut kept = IndexMap::new();
                for name in keep {
                    kept.insert(name.to_string(), r.modalities[*name].clone());
                }
                CohortRecord {
                    id: r.id.clone(),
                    attrs: r.attrs,
                    labels: r.labels.clone(),
                    modalities: kept,
                }
            })
            .collect();
        Ok(Cohort {
            schema: CohortSchema { modalities, task_count: self.schema.task_count },
            records,
        })
    }
}

fn validate_record(record: &CohortRecord, schema: &CohortSchema) -> Result<()> {
    if record.labels.len() != schema.task_count {
        return Err(Error::schema(format!(
            "record '{}': expected {} labels, found {}",
            record.id,
            schema.task_count,
            record.labels.len()
        )));
    }
    for (i, l) in record.labels.iter().enumerate() {
        if *l > 1 {
            return Err(Error::schema(format!(
                "record '{}': label {} has value {} (must be 0 or 1)",
                record.id, i, l
            )));
        }
    }
    if record.modalities.len() != schema.modalities.len() {
        return Err(Error::schema(format!(
            "record '{}': expected {} modalities, found {}",
            record.id,
            schema.modalities.len(),
            record.modalities.len()
        )));
    }
    for def in &schema.modalities {
        let vec = record.modalities.get(&def.name).ok_or_else(|| {
            Error::schema(format!("record '{}': missing modality '{}'", record.id, def.name))
        })?;
        if vec.len() != def.width {
            return Err(Error::schema(format!(
                "record '{}': modality '{}' has width {}, expected {}",
                record.id,
                def.name,
                vec.len(),
                def.width
            )));
        }
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema(format!(
                "record '{}': modality '{}' contains a non-finite value",
                record.id, def.name
            )));
        }
    }
    Ok(())
}

fn schema_from_record(record: &CohortRecord) -> CohortSchema {
    CohortSchema {
        modalities: record
            .modalities
            .iter()
            .map(|(name, vec)| ModalityDef { name: clone_name(name), width: vec.len() })
            .collect(),
        task_count: record.labels.len(),
    }
}

fn clone_name(s: &str) -> String {
    s.to_string()
}

/// Load a JSON Lines cohort file. The schema (modality names, widths, task
/// count) is inferred from the first record and enforced on all others.
pub fn load_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    let file = File::open(path.as_ref()).map_err(|e| {
        Error::input(format!("cannot open cohort file {}: {e}", path.as_ref().display()))
    })?;
    let reader = BufReader::new(file);
    let mut records: Vec<CohortRecord> = Vec::new();
    let mut schema: Option<CohortSchema> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CohortRecord = serde_json::from_str(&line).map_err(|e| {
            let msg = format!("cohort line {}: {e}", lineno + 1);
            if e.to_string().contains("unknown variant") {
                Error::schema(msg)
            } else {
                Error::input(msg)
            }
        })?;
        let schema = schema.get_or_insert_with(|| schema_from_record(&record));
        validate_record(&record, schema)?;
        records.push(record);
    }
    let schema = schema.ok_or_else(|| Error::input("cohort file holds no records".to_string()))?;
    Ok(Cohort { schema, records })
}

/// Write a cohort as JSON Lines, one record per line.
pub fn write_cohort(path: impl AsRef<Path>, cohort: &Cohort) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    for record in &cohort.records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Disjoint train/validation/test id sets covering a cohort exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Deterministic 80/20 split with 5% of the remaining training portion held
/// out for validation. Ids are shuffled by the seed; no stratification.
pub fn split_cohort(cohort: &Cohort, seed: u64) -> Result<Split> {
    let n = cohort.len();
    if n < 3 {
        return Err(Error::input(format!("cohort of {n} records is too small to split (need 3)")));
    }
    let mut ids: Vec<String> = cohort.records.iter().map(|r| r.id.clone()).collect();
    let mut rng = StdRng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let test_n = (((n as f64) * 0.2).round() as usize).max(1);
    let rest = n - test_n;
    let val_n = (((rest as f64) * 0.05).round() as usize).max(1);

    let test_ids = ids[..test_n].to_vec();
    let val_ids = ids[test_n..test_n + val_n].to_vec();
    let train_ids = ids[test_n + val_n..].to_vec();
    Ok(Split { train_ids, val_ids, test_ids })
}

/// One requested bias injection: extra Gaussian noise on one modality for one
/// subgroup, degrading that modality's separability there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub modality: String,
    pub attribute: Attribute,
    pub subgroup: String,
    pub noise_strength: f64,
}

impl BiasSpec {
    /// Parse `modality:attribute:subgroup:strength`.
    pub fn parse(s: &str) -> Result<BiasSpec> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 {
            return Err(Error::config(format!(
                "bias spec '{s}' is not modality:attribute:subgroup:strength"
            )));
        }
        let attribute = Attribute::parse(parts[1])?;
        if !attribute.subgroups().contains(&parts[2]) {
            return Err(Error::config(format!(
                "bias spec '{s}': unknown subgroup '{}' for attribute '{}'",
                parts[2], parts[1]
            )));
        }
        let noise_strength: f64 = parts[3]
            .parse()
            .map_err(|_| Error::config(format!("bias spec '{s}': bad strength '{}'", parts[3])))?;
        Ok(BiasSpec {
            modality: parts[0].to_string(),
            attribute,
            subgroup: parts[2].to_string(),
            noise_strength,
        })
    }
}

/// Synthetic cohort generator configuration. Defaults reproduce the reference
/// subgroup and outcome distributions at n = 33,721.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub modalities: Vec<ModalityDef>,
    pub ethnicity_marginals: Vec<f64>,
    pub insurance_marginals: Vec<f64>,
    pub age_marginals: Vec<f64>,
    /// Per-task positive prevalence, label order [mortality, los_ge_7, mech_vent].
    pub prevalences: Vec<f64>,
    /// Per-modality class separation along a fixed unit direction.
    pub signal: Vec<f64>,
    pub bias: Vec<BiasSpec>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n: 33_721,
            modalities: vec![
                ModalityDef { name: "demographic".into(), width: 16 },
                ModalityDef { name: "structured".into(), width: 64 },
                ModalityDef { name: "notes".into(), width: 64 },
            ],
            ethnicity_marginals: vec![0.708, 0.076, 0.032, 0.020, 0.164],
            insurance_marginals: vec![0.509, 0.360, 0.086, 0.031, 0.014],
            age_marginals: vec![0.054, 0.170, 0.396, 0.380],
            prevalences: vec![0.1013, 0.1480, 0.9002],
            signal: vec![1.0, 1.0, 1.0],
            bias: Vec::new(),
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("generator needs n > 0".to_string()));
        }
        if self.modalities.is_empty() {
            return Err(Error::config("generator needs at least one modality".to_string()));
        }
        if self.signal.len() != self.modalities.len() {
            return Err(Error::config(format!(
                "signal has {} entries for {} modalities",
                self.signal.len(),
                self.modalities.len()
            )));
        }
        for (name, marginals, card) in [
            ("ethnicity", &self.ethnicity_marginals, Ethnicity::ALL.len()),
            ("insurance", &self.insurance_marginals, Insurance::ALL.len()),
            ("age_bucket", &self.age_marginals, AgeBucket::ALL.len()),
        ] {
            if marginals.len() != card {
                return Err(Error::config(format!(
                    "{name} marginals: expected {card} values, found {}",
                    marginals.len()
                )));
            }
            if marginals.iter().any(|p| *p < 0.0) {
                return Err(Error::config(format!("{name} marginals contain a negative value")));
            }
            let sum: f64 = marginals.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("{name} marginals sum to {sum}, not 1")));
            }
        }
        if self.prevalences.is_empty() {
            return Err(Error::config("generator needs at least one task".to_string()));
        }
        for p in &self.prevalences {
            if !(*p > 0.0 && *p < 1.0) {
                return Err(Error::config(format!("prevalence {p} outside (0, 1)")));
            }
        }
        for b in &self.bias {
            if b.noise_strength < 0.0 {
                return Err(Error::config(format!(
                    "bias noise strength {} is negative",
                    b.noise_strength
                )));
            }
            if !self.modalities.iter().any(|m| m.name == b.modality) {
                return Err(Error::config(format!("bias targets unknown modality '{}'", b.modality)));
            }
            if !b.attribute.subgroups().contains(&b.subgroup.as_str()) {
                return Err(Error::config(format!(
                    "bias targets unknown subgroup '{}' of '{}'",
                    b.subgroup, b.attribute
                )));
            }
        }
        Ok(())
    }
}

fn randn(rng: &mut StdRng) -> f64 {
    StandardNormal.sample(rng)
}

fn sample_categorical(rng: &mut StdRng, marginals: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in marginals.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    marginals.len() - 1
}

/// Generate a synthetic cohort.
///
/// Attributes are sampled independently from the marginals, labels per task
/// from the prevalences, and each modality vector is drawn from a
/// class-conditional Gaussian: mean +/- signal * u_m along a fixed unit
/// direction (sign set by the majority of task labels, ties positive) plus
/// unit isotropic noise. Matching bias specs add zero-mean Gaussian noise to
/// that modality only.
pub fn generate_cohort(cfg: &GeneratorConfig) -> Result<Cohort> {
    cfg.validate()?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);

    // Fixed unit direction per modality.
    let directions: Vec<Vec<f64>> = cfg
        .modalities
        .iter()
        .map(|m| {
            let raw: Vec<f64> = (0..m.width).map(|_| randn(&mut rng)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.into_iter().map(|v| v / norm).collect()
        })
        .collect();

    let id_width = cfg.n.to_string().len().max(4);
    let mut records = Vec::with_capacity(cfg.n);
    for idx in 0..cfg.n {
        let ethnicity = Ethnicity::ALL[sample_categorical(&mut rng, &cfg.ethnicity_marginals)];
        let insurance = Insurance::ALL[sample_categorical(&mut rng, &cfg.insurance_marginals)];
        let age_bucket = AgeBucket::ALL[sample_categorical(&mut rng, &cfg.age_marginals)];
        let attrs = SensitiveAttributes { ethnicity, insurance, age_bucket };

        let labels: Vec<u8> = cfg
            .prevalences
            .iter()
            .map(|p| if rng.random::<f64>() < *p { 1 } else { 0 })
            .collect();
        let positives = labels.iter().filter(|l| **l == 1).count();
        // Majority vote over task labels, ties positive.
        let sign = if 2 * positives >= labels.len() { 1.0 } else { -1.0 };

        let mut modalities = IndexMap::new();
        for (m, def) in cfg.modalities.iter().enumerate() {
            let mut vec: Vec<f64> = (0..def.width)
                .map(|d| sign * cfg.signal[m] * directions[m][d] + randn(&mut rng))
                .collect();
            for bias in &cfg.bias {
                if bias.modality == def.name && attrs.subgroup(bias.attribute) == bias.subgroup {
                    for v in vec.iter_mut() {
                        *v += bias.noise_strength * randn(&mut rng);
                    }
                }
            }
            modalities.insert(def.name.clone(), vec);
        }

        records.push(CohortRecord {
            id: format!("p{:0width$}", idx, width = id_width),
            attrs,
            labels,
            modalities,
        });
    }

    Ok(Cohort {
        schema: CohortSchema {
            modalities: cfg.modalities.clone(),
            task_count: cfg.prevalences.len(),
        },
        records,
    })
}
