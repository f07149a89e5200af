//! Run configuration: TOML file, `--key value` overrides, validation.

use std::path::{Path, PathBuf};

use histnet::dataset::{DEEPSHIP_CLASSES, DEFAULT_RATIOS};
use histnet::features::{FeatureConfig, FeatureKind};
use histnet::models::{ModelConfig, ModelKind};
use histnet::synth::SynthSpec;
use histnet::train::HyperParams;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub synth: SynthSpec,
    pub features: FeatureConfig,
    pub extract: ExtractConfig,
    pub model: ModelConfig,
    pub train: HyperParams,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            dataset: DatasetConfig::default(),
            synth: SynthSpec::default(),
            features: FeatureConfig::default(),
            extract: ExtractConfig::default(),
            model: ModelConfig::default(),
            train: HyperParams::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Synthetic corpus output.
    pub data: PathBuf,
    /// Manifest read by `ingest`; empty means `<data>/manifest.csv`.
    pub manifest: PathBuf,
    /// Ingested audio, partitions and feature cache.
    pub cache: PathBuf,
    /// Experiment directories and reports.
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "work/data".into(),
            manifest: PathBuf::new(),
            cache: "work/cache".into(),
            output: "work/runs".into(),
        }
    }
}

impl Paths {
    pub fn manifest(&self) -> PathBuf {
        if self.manifest.as_os_str().is_empty() {
            self.data.join("manifest.csv")
        } else {
            self.manifest.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Names for labels 0..3.
    pub class_names: Vec<String>,
    /// Labels kept for training and evaluation; empty keeps all four.
    pub classes: Vec<usize>,
    pub partition_seed: u64,
    pub ratios: [f64; 3],
    pub segment_s: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            class_names: DEEPSHIP_CLASSES.iter().map(|s| s.to_string()).collect(),
            classes: Vec::new(),
            partition_seed: 0,
            ratios: [DEFAULT_RATIOS.0, DEFAULT_RATIOS.1, DEFAULT_RATIOS.2],
            segment_s: histnet::audio::SEGMENT_SECONDS,
        }
    }
}

impl DatasetConfig {
    pub fn selected_classes(&self) -> Vec<usize> {
        if self.classes.is_empty() {
            (0..histnet::audio::NUM_CLASSES).collect()
        } else {
            self.classes.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub kinds: Vec<FeatureKind>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            kinds: FeatureKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub models: Vec<ModelKind>,
    pub features: Vec<FeatureKind>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            models: vec![ModelKind::Tdnn, ModelKind::Hltdnn],
            features: vec![FeatureKind::Stft],
        }
    }
}

/// Short flags accepted in place of full keys.
const ALIASES: [(&str, &str); 3] = [
    ("model", "experiment.models"),
    ("feature", "experiment.features"),
    ("out", "paths.output"),
];

/// Splits `--key value` pairs, pulling out `--config`.
pub fn parse_overrides(args: &[String]) -> Result<(Option<PathBuf>, Vec<(String, String)>), CliError> {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .filter(|k| !k.is_empty())
            .ok_or_else(|| CliError::Usage(format!("expected --key, found `{}`", arg)))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("--{} needs a value", key)))?;
                (key.to_string(), v.clone())
            }
        };
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            let key = ALIASES
                .iter()
                .find(|(a, _)| *a == key)
                .map(|(_, full)| full.to_string())
                .unwrap_or(key);
            pairs.push((key, value));
        }
    }
    Ok((config, pairs))
}

/// Reads the file (if any), applies overrides in order and validates the result.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {}", path.display(), e)))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Usage(format!("config {}: {}", path.display(), e)))?
        }
        None => Table::new(),
    };
    let defaults = Value::try_from(RunConfig::default()).expect("default config serializes");
    check_keys(&table, &defaults, "")?;
    for (key, raw) in overrides {
        let template = lookup(&defaults, key).ok_or_else(|| unknown_key(key))?;
        set(&mut table, key, parse_value(raw, template));
    }
    let config: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid config: {}", e.message())))?;
    config.validate()?;
    Ok(config)
}

fn unknown_key(key: &str) -> CliError {
    CliError::Usage(format!("unknown config key `{}`", key))
}

fn check_keys(table: &Table, template: &Value, prefix: &str) -> Result<(), CliError> {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{}.{}", prefix, k) };
        let sub = match template {
            Value::Table(t) => t.get(k),
            _ => None,
        };
        match (sub, v) {
            (None, _) => return Err(unknown_key(&path)),
            (Some(s @ Value::Table(_)), Value::Table(inner)) => check_keys(inner, s, &path)?,
            _ => {}
        }
    }
    Ok(())
}

fn lookup<'a>(value: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(value, |v, part| v.as_table()?.get(part))
}

fn set(table: &mut Table, key: &str, value: Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        cur = entry.as_table_mut().expect("table");
    }
    cur.insert(last.to_string(), value);
}

/// Interprets a command-line value using the default's type as a guide.
fn parse_value(raw: &str, template: &Value) -> Value {
    let literal = |s: &str| -> Option<Value> {
        format!("v = {}", s)
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
    };
    match template {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(items) => literal(raw).filter(Value::is_array).unwrap_or_else(|| {
            let element = items.first().cloned().unwrap_or(Value::Integer(0));
            Value::Array(
                raw.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(s, &element))
                    .collect(),
            )
        }),
        Value::Float(_) => match literal(raw) {
            Some(Value::Integer(i)) => Value::Float(i as f64),
            Some(v) => v,
            None => Value::String(raw.to_string()),
        },
        _ => literal(raw).unwrap_or_else(|| Value::String(raw.to_string())),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: histnet::Error| CliError::Usage(format!("invalid config: {}", e));
        self.synth.validate().map_err(bad)?;
        self.features.validate().map_err(bad)?;
        self.model.validate().map_err(bad)?;
        self.train.validate().map_err(bad)?;
        let d = &self.dataset;
        if d.class_names.len() != histnet::audio::NUM_CLASSES {
            return Err(CliError::Usage(format!(
                "dataset.class_names needs {} names",
                histnet::audio::NUM_CLASSES
            )));
        }
        let mut seen = [false; histnet::audio::NUM_CLASSES];
        for &c in &d.classes {
            if c >= seen.len() || std::mem::replace(&mut seen[c], true) {
                return Err(CliError::Usage(format!("dataset.classes: bad or repeated label {}", c)));
            }
        }
        if d.classes.len() == 1 {
            return Err(CliError::Usage("dataset.classes needs at least two labels".into()));
        }
        if !(d.segment_s > 0.0) {
            return Err(CliError::Usage("dataset.segment_s must be positive".into()));
        }
        if self.experiment.models.is_empty() || self.experiment.features.is_empty() {
            return Err(CliError::Usage("experiment.models and experiment.features must be non-empty".into()));
        }
        Ok(())
    }

    /// The model configuration with the class count matching the selected labels.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.dataset.selected_classes().len(),
            ..self.model.clone()
        }
    }

    pub fn selected_class_names(&self) -> Vec<String> {
        self.dataset
            .selected_classes()
            .iter()
            .map(|&c| self.dataset.class_names[c].clone())
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
