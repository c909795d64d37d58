//! Flat key-value config files plus command-line overrides.
//!
//! Files hold one `key value` pair per line (`#` starts a comment). Values
//! repeat the CLI flag syntax, so a config line and a `--key value` override
//! are interchangeable; overrides win.

use std::path::Path;

use anyhow::{bail, Context, Result};
use fame_core::cohort::{BiasSpec, GeneratorConfig, ModalityDef};
use fame_core::model::FusionMode;
use fame_core::train::TrainConfig;

/// Parsed config file contents, in file order.
#[derive(Default, Debug)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<KeyValues> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(char::is_whitespace)
                .with_context(|| format!("config line {}: expected 'key value'", lineno + 1))?;
            entries.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<KeyValues> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all(&self, key: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("config key '{key}': bad value '{value}': {e}"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

/// `name:value` pairs, comma separated, e.g. `demographic:16,structured:64`.
fn parse_named_list(key: &str, value: &str) -> Result<Vec<(String, f64)>> {
    value
        .split(',')
        .map(|part| {
            let (name, v) = part
                .split_once(':')
                .with_context(|| format!("config key '{key}': expected name:value in '{part}'"))?;
            Ok((name.trim().to_string(), parse_value(key, v.trim())?))
        })
        .collect()
}

const TRAIN_KEYS: [&str; 21] = [
    "mode",
    "lambda",
    "gamma",
    "clip",
    "l1_alpha",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "patience",
    "max_epochs",
    "plateau_factor",
    "plateau_patience",
    "min_lr",
    "seed",
    "threshold",
    "proj_dim",
    "hidden_dim",
    "dropout",
];

/// Apply config-file entries on top of the default training config.
pub fn train_config(kv: &KeyValues) -> Result<TrainConfig> {
    for key in kv.keys() {
        if !TRAIN_KEYS.contains(&key) {
            bail!("unknown training config key '{key}'");
        }
    }
    let mut cfg = TrainConfig::default();
    if let Some(v) = kv.get("mode") {
        cfg.mode = FusionMode::parse(v)?;
    }
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = kv.get(stringify!($field)) {
                cfg.$field = parse_value(stringify!($field), v)?;
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

const GENERATOR_KEYS: [&str; 9] = [
    "n",
    "seed",
    "widths",
    "signals",
    "marginals.ethnicity",
    "marginals.insurance",
    "marginals.age_bucket",
    "prevalences",
    "bias",
];

/// Apply config-file entries on top of the default generator config.
pub fn generator_config(kv: &KeyValues) -> Result<GeneratorConfig> {
    for key in kv.keys() {
        if !GENERATOR_KEYS.contains(&key) {
            bail!("unknown generator config key '{key}'");
        }
    }
    let mut cfg = GeneratorConfig::default();
    if let Some(v) = kv.get("n") {
        cfg.n = parse_value("n", v)?;
    }
    if let Some(v) = kv.get("seed") {
        cfg.seed = parse_value("seed", v)?;
    }
    if let Some(v) = kv.get("widths") {
        set_widths(&mut cfg, v)?;
    }
    if let Some(v) = kv.get("signals") {
        set_signals(&mut cfg, v)?;
    }
    if let Some(v) = kv.get("marginals.ethnicity") {
        cfg.ethnicity_marginals = parse_list("marginals.ethnicity", v)?;
    }
    if let Some(v) = kv.get("marginals.insurance") {
        cfg.insurance_marginals = parse_list("marginals.insurance", v)?;
    }
    if let Some(v) = kv.get("marginals.age_bucket") {
        cfg.age_marginals = parse_list("marginals.age_bucket", v)?;
    }
    if let Some(v) = kv.get("prevalences") {
        cfg.prevalences = parse_list("prevalences", v)?;
    }
    let bias_lines = kv.get_all("bias");
    if !bias_lines.is_empty() {
        cfg.bias = bias_lines
            .iter()
            .map(|b| BiasSpec::parse(b).map_err(anyhow::Error::from))
            .collect::<Result<Vec<_>>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Replace the modality set: `demographic:16,structured:64,notes:64`.
/// Signals are carried over by name and default to 1.0 for new modalities.
pub fn set_widths(cfg: &mut GeneratorConfig, value: &str) -> Result<()> {
    let named = parse_named_list("widths", value)?;
    let old: Vec<(String, f64)> = cfg
        .modalities
        .iter()
        .zip(&cfg.signal)
        .map(|(m, s)| (m.name.clone(), *s))
        .collect();
    cfg.modalities = named
        .iter()
        .map(|(name, w)| ModalityDef { name: name.clone(), width: *w as usize })
        .collect();
    cfg.signal = named
        .iter()
        .map(|(name, _)| {
            old.iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| *s)
                .unwrap_or(1.0)
        })
        .collect();
    Ok(())
}

/// Update per-modality signal strengths: `demographic:3.0,notes:0.65`.
pub fn set_signals(cfg: &mut GeneratorConfig, value: &str) -> Result<()> {
    for (name, s) in parse_named_list("signals", value)? {
        let idx = cfg
            .modalities
            .iter()
            .position(|m| m.name == name)
            .with_context(|| format!("signals: unknown modality '{name}'"))?;
        cfg.signal[idx] = s;
    }
    Ok(())
}
