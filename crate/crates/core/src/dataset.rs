//! Dataset manifests and signal-level train/validation/test partitions.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::NUM_CLASSES;
use crate::error::{Error, Result};

pub const DEEPSHIP_CLASSES: [&str; NUM_CLASSES] = ["cargo", "passengership", "tanker", "tug"];

/// Default split ratios (train, validation, test).
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.70, 0.15, 0.15);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: String,
    pub path: PathBuf,
    pub label: usize,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() != NUM_CLASSES {
            return Err(Error::invalid(format!("expected {} class names", NUM_CLASSES)));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.record_id.as_str()) {
                return Err(Error::invalid(format!("duplicate record_id {}", e.record_id)));
            }
            if e.label >= NUM_CLASSES {
                return Err(Error::invalid(format!("record {} has label {}", e.record_id, e.label)));
            }
        }
        Ok(DatasetManifest { entries, class_names })
    }

    pub fn with_default_classes(entries: Vec<ManifestEntry>) -> Result<Self> {
        Self::new(entries, DEEPSHIP_CLASSES.iter().map(|s| s.to_string()).collect())
    }

    /// Reads `record_id,path,label,duration_s`; relative paths resolve against the CSV's directory.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut reader = csv::Reader::from_path(path)?;
        let expected = ["record_id", "path", "label", "duration_s"];
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Format {
                format: "manifest",
                path: path.to_path_buf(),
                message: format!("header must be {}", expected.join(",")),
            });
        }
        let mut entries = Vec::new();
        for row in reader.deserialize() {
            let mut e: ManifestEntry = row?;
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            entries.push(e);
        }
        Self::with_default_classes(entries)
    }

    /// Writes the CSV form; paths under `relative_to` are stored relative to it.
    pub fn write_csv(&self, path: &Path, relative_to: Option<&Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            let mut e = e.clone();
            if let Some(root) = relative_to {
                if let Ok(rel) = e.path.strip_prefix(root) {
                    e.path = rel.to_path_buf();
                }
            }
            w.serialize(&e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown partition {}", other))),
        }
    }
}

/// Disjoint record-id sets; every segment follows its parent record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl PartitionSpec {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, record_id: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|s| self.ids(*s).iter().any(|id| id == record_id))
    }

    /// Record id to split, for bulk lookups.
    pub fn assignments(&self) -> BTreeMap<String, Split> {
        Split::ALL
            .into_iter()
            .flat_map(|s| self.ids(s).iter().map(move |id| (id.clone(), s)))
            .collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Per-class split sizes: train rounds up, validation rounds down, test takes the rest.
///
/// Every split keeps at least one signal.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::invalid(format!(
            "{} signals cannot fill three partitions",
            n
        )));
    }
    let mut train = ((ratios.0 * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut val = ((ratios.1 * n as f64) + 1e-9).floor() as usize;
    train = train.min(n);
    val = val.min(n - train);
    let mut test = n - train - val;
    for slot in [&mut val, &mut test] {
        if *slot == 0 {
            *slot = 1;
            train -= 1;
        }
    }
    if train == 0 {
        return Err(Error::invalid(format!("{} signals leave no training data", n)));
    }
    Ok((train, val, test))
}

/// Stratified, seeded, signal-level split.
pub fn partition(manifest: &DatasetManifest, ratios: (f64, f64, f64), seed: u64) -> Result<PartitionSpec> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "ratios {:?} must be positive and sum to 1",
            ratios
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = PartitionSpec {
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in 0..NUM_CLASSES {
        let mut ids: Vec<&str> = manifest
            .entries
            .iter()
            .filter(|e| e.label == class)
            .map(|e| e.record_id.as_str())
            .collect();
        ids.sort_unstable();
        if ids.len() < 3 {
            return Err(Error::invalid(format!(
                "class {} has {} signals; each partition needs at least one",
                manifest.class_names[class],
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        let (n_train, n_val, _) = split_sizes(ids.len(), ratios)?;
        spec.train.extend(ids[..n_train].iter().map(|s| s.to_string()));
        spec.val.extend(ids[n_train..n_train + n_val].iter().map(|s| s.to_string()));
        spec.test.extend(ids[n_train + n_val..].iter().map(|s| s.to_string()));
    }
    spec.train.sort();
    spec.val.sort();
    spec.test.sort();
    Ok(spec)
}
