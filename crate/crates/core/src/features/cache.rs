//! `TFF1` feature files and the CSV index that lists them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatureKind, TimeFrequencyFeature};
use crate::dataset::Split;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TFF1";
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 4;

pub fn write_feature(path: &Path, feature: &TimeFrequencyFeature, label: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * feature.data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.push(feature.kind.code());
    bytes.extend_from_slice(&(feature.freq_bins as u32).to_le_bytes());
    bytes.extend_from_slice(&(feature.time_frames as u32).to_le_bytes());
    bytes.extend_from_slice(&(label as u32).to_le_bytes());
    for v in &feature.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a feature file, returning the map and its label.
///
/// The file does not record the unpadded extent or normalization state, so the
/// whole map is reported as valid and `normalized` is false.
pub fn read_feature(path: &Path) -> Result<(TimeFrequencyFeature, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |message: String| Error::Format {
        format: "TFF1",
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(fail("missing TFF1 header".into()));
    }
    let kind = FeatureKind::from_code(bytes[4]).ok_or_else(|| fail(format!("unknown feature kind {}", bytes[4])))?;
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (f, t, label) = (u32_at(5), u32_at(9), u32_at(13));
    let expected = f
        .checked_mul(t)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail("dimensions overflow".into()))?;
    if bytes.len() - HEADER_LEN != expected {
        return Err(fail(format!(
            "{}x{} map needs {} data bytes, found {}",
            f,
            t,
            expected,
            bytes.len() - HEADER_LEN
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        TimeFrequencyFeature {
            kind,
            data,
            freq_bins: f,
            time_frames: t,
            valid_freq: f,
            valid_time: t,
            normalized: false,
        },
        label,
    ))
}

/// One row of the feature index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub segment_id: String,
    pub kind: FeatureKind,
    pub path: PathBuf,
    pub label: usize,
    pub partition: Split,
}

const INDEX_HEADER: [&str; 5] = ["segment_id", "kind", "path", "label", "partition"];

/// Writes the index; paths are stored relative to the index file's directory when possible.
pub fn write_index(path: &Path, entries: &[IndexEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        w.serialize(IndexEntry {
            path: rel.to_path_buf(),
            ..e.clone()
        })?;
    }
    if entries.is_empty() {
        w.write_record(INDEX_HEADER)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the index, resolving relative paths against the index file's directory.
pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != INDEX_HEADER {
        return Err(Error::Format {
            format: "feature index",
            path: path.to_path_buf(),
            message: format!("expected header {}, found {}", INDEX_HEADER.join(","), header.join(",")),
        });
    }
    let base = path.parent().unwrap_or(Path::new(""));
    r.deserialize::<IndexEntry>()
        .map(|row| {
            let mut e = row?;
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            Ok(e)
        })
        .collect()
}
