//! The six pipeline stages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use histnet::audio::{decode_wav, resample, segment, write_wav, TARGET_RATE};
use histnet::dataset::{partition, DatasetManifest, Split};
use histnet::features::{
    normalize, read_feature, read_index, write_feature, write_index, FeatureConfig, FeatureExtractor, FeatureKind,
    IndexEntry, NormAccumulator, NormStats,
};
use histnet::metrics::ConfusionMatrix;
use histnet::models::ModelKind;
use histnet::train::{
    evaluate as evaluate_model, load_model, metrics_report, run_experiment, ExperimentSummary, FeatureSet, MeanStd,
    Partitions, RunRecord,
};
use histnet::Checkpoint;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{self, RunConfig};
use crate::CliError;

const SEGMENTS_CSV: &str = "segments.csv";
const PARTITION_JSON: &str = "partition.json";
const FEATURES_DIR: &str = "features";
const INDEX_CSV: &str = "index.csv";
const FEATURE_CONFIG: &str = "feature_config.json";
const FROZEN_CONFIG: &str = "config.toml";

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("cannot create {}: {}", path.display(), e)))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {}", path.display(), e)))
}

fn missing(what: &Path, stage: &str) -> CliError {
    CliError::Usage(format!(
        "{} not found; run `sonar-histnet {}` first",
        what.display(),
        stage
    ))
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    create_dir(&cfg.paths.data)?;
    let manifest = histnet::synth::generate(&cfg.synth, &cfg.paths.data)?;
    info!(
        "wrote {} signals and {}",
        manifest.entries.len(),
        cfg.paths.data.join("manifest.csv").display()
    );
    Ok(())
}

/// One 3 s segment of an ingested recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SegmentRow {
    segment_id: String,
    record_id: String,
    index: usize,
    label: usize,
    partition: Split,
    /// Ingested audio, relative to the cache directory.
    path: PathBuf,
}

fn safe_id(id: &str) -> Result<(), CliError> {
    if id.is_empty() || id.starts_with('.') || id.contains(['/', '\\']) {
        return Err(CliError::Usage(format!("record_id `{}` cannot be used as a file name", id)));
    }
    Ok(())
}

pub fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let manifest_path = cfg.paths.manifest();
    if !manifest_path.is_file() {
        return Err(CliError::Usage(format!(
            "manifest {} not found; run `sonar-histnet synth` first or set paths.manifest",
            manifest_path.display()
        )));
    }
    let read = DatasetManifest::read_csv(&manifest_path)?;
    let manifest = DatasetManifest::new(read.entries, cfg.dataset.class_names.clone())?;
    let r = cfg.dataset.ratios;
    let spec = partition(&manifest, (r[0], r[1], r[2]), cfg.dataset.partition_seed)?;
    let splits = spec.assignments();
    let audio_dir = cfg.paths.cache.join("audio");
    create_dir(&audio_dir)?;
    for e in &manifest.entries {
        safe_id(&e.record_id)?;
    }
    let per_record = manifest
        .entries
        .par_iter()
        .map(|e| -> Result<Vec<SegmentRow>, CliError> {
            let signal = resample(&decode_wav(&e.path, &e.record_id, e.label)?, TARGET_RATE)?;
            let rel = PathBuf::from("audio").join(format!("{}.wav", e.record_id));
            write_wav(&cfg.paths.cache.join(&rel), &signal.samples, TARGET_RATE)?;
            let segments = segment(&signal, cfg.dataset.segment_s)?;
            Ok(segments
                .iter()
                .map(|s| SegmentRow {
                    segment_id: s.id(),
                    record_id: e.record_id.clone(),
                    index: s.index,
                    label: e.label,
                    partition: splits[&e.record_id],
                    path: rel.clone(),
                })
                .collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows: Vec<SegmentRow> = per_record.into_iter().flatten().collect();
    rows.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));
    let seg_path = cfg.paths.cache.join(SEGMENTS_CSV);
    let mut w = csv::Writer::from_path(&seg_path).map_err(histnet::Error::from)?;
    for row in &rows {
        w.serialize(row).map_err(histnet::Error::from)?;
    }
    w.flush().map_err(|e| histnet::Error::io(&seg_path, e))?;
    spec.write_json(&cfg.paths.cache.join(PARTITION_JSON))?;
    let count = |s: Split| rows.iter().filter(|r| r.partition == s).count();
    info!(
        "{} records -> {} segments (train {}, val {}, test {}) from {} / {} / {} signals",
        manifest.entries.len(),
        rows.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        spec.train.len(),
        spec.val.len(),
        spec.test.len()
    );
    Ok(())
}

fn read_segments(cache: &Path) -> Result<Vec<SegmentRow>, CliError> {
    let path = cache.join(SEGMENTS_CSV);
    if !path.is_file() || !cache.join(PARTITION_JSON).is_file() {
        return Err(missing(&path, "ingest"));
    }
    let mut r = csv::Reader::from_path(&path).map_err(histnet::Error::from)?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<SegmentRow>, _>>()
        .map_err(histnet::Error::from)?;
    Ok(rows)
}

fn feature_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.cache.join(FEATURES_DIR)
}

fn norm_path(dir: &Path, kind: FeatureKind) -> PathBuf {
    dir.join(format!("norm_{}.json", kind))
}

pub fn extract(cfg: &RunConfig) -> Result<(), CliError> {
    let rows = read_segments(&cfg.paths.cache)?;
    let dir = feature_dir(cfg);
    let kinds = &cfg.extract.kinds;
    if kinds.is_empty() {
        return Err(CliError::Usage("extract.kinds is empty".into()));
    }
    let extractors = kinds
        .iter()
        .map(|k| FeatureExtractor::new(*k, &cfg.features))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("invalid feature settings: {}", e)))?;
    for k in kinds {
        create_dir(&dir.join(k.as_str()))?;
    }
    let mut by_record: BTreeMap<&str, Vec<&SegmentRow>> = BTreeMap::new();
    for row in &rows {
        by_record.entry(&row.record_id).or_default().push(row);
    }
    let records: Vec<(&str, Vec<&SegmentRow>)> = by_record.into_iter().collect();
    let results = records
        .par_iter()
        .map(|(record_id, rows)| -> Result<_, CliError> {
            let first = rows[0];
            let signal = decode_wav(&cfg.paths.cache.join(&first.path), record_id, first.label)?;
            let segments = segment(&signal, cfg.dataset.segment_s)?;
            let mut entries = Vec::with_capacity(rows.len() * kinds.len());
            let mut accs: Vec<NormAccumulator> = kinds.iter().map(|k| NormAccumulator::new(*k)).collect();
            for row in rows {
                let seg = segments.get(row.index).ok_or_else(|| {
                    CliError::Runtime(format!(
                        "segment {} is missing from the ingested audio; rerun `sonar-histnet ingest`",
                        row.segment_id
                    ))
                })?;
                for (ex, acc) in extractors.iter().zip(accs.iter_mut()) {
                    let f = ex.extract(&seg.samples)?;
                    let path = dir.join(f.kind.as_str()).join(format!("{}.tff", row.segment_id));
                    write_feature(&path, &f, row.label)?;
                    if row.partition == Split::Train {
                        acc.add(&f)?;
                    }
                    entries.push(IndexEntry {
                        segment_id: row.segment_id.clone(),
                        kind: f.kind,
                        path,
                        label: row.label,
                        partition: row.partition,
                    });
                }
            }
            Ok((entries, accs))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut totals: Vec<NormAccumulator> = kinds.iter().map(|k| NormAccumulator::new(*k)).collect();
    let mut index = Vec::new();
    for (entries, accs) in results {
        index.extend(entries);
        for (t, a) in totals.iter_mut().zip(&accs) {
            t.merge(a)?;
        }
    }
    index.sort_by(|a, b| (a.kind.code(), &a.segment_id).cmp(&(b.kind.code(), &b.segment_id)));
    for t in &totals {
        let stats = t.finish()?;
        let p = norm_path(&dir, stats.kind);
        write_text(&p, &serde_json::to_string_pretty(&stats).map_err(histnet::Error::from)?)?;
    }
    write_index(&dir.join(INDEX_CSV), &index)?;
    write_text(
        &dir.join(FEATURE_CONFIG),
        &serde_json::to_string_pretty(&cfg.features).map_err(histnet::Error::from)?,
    )?;
    info!("{} feature files for {} segments", index.len(), rows.len());
    Ok(())
}

/// Loads one feature kind's cached maps, normalized with training statistics and
/// restricted to the selected classes (relabelled 0..k in selection order).
fn load_partitions(cfg: &RunConfig, kind: FeatureKind) -> Result<Partitions, CliError> {
    let dir = feature_dir(cfg);
    let index_path = dir.join(INDEX_CSV);
    if !index_path.is_file() {
        return Err(missing(&index_path, "extract"));
    }
    let cached: FeatureConfig = serde_json::from_str(
        &std::fs::read_to_string(dir.join(FEATURE_CONFIG))
            .map_err(|_| missing(&dir.join(FEATURE_CONFIG), "extract"))?,
    )
    .map_err(histnet::Error::from)?;
    if cached != cfg.features {
        return Err(CliError::Usage(
            "feature settings differ from those used for the cache; rerun `sonar-histnet extract`".into(),
        ));
    }
    let stats_path = norm_path(&dir, kind);
    if !stats_path.is_file() {
        return Err(CliError::Usage(format!(
            "no cached {} features; add it to extract.kinds and run `sonar-histnet extract`",
            kind
        )));
    }
    let stats: NormStats = serde_json::from_str(
        &std::fs::read_to_string(&stats_path).map_err(|e| histnet::Error::io(&stats_path, e))?,
    )
    .map_err(histnet::Error::from)?;
    let classes = cfg.dataset.selected_classes();
    let entries: Vec<IndexEntry> = read_index(&index_path)?
        .into_iter()
        .filter(|e| e.kind == kind && classes.contains(&e.label))
        .collect();
    let loaded = entries
        .par_iter()
        .map(|e| -> Result<_, CliError> {
            let (f, label) = read_feature(&e.path)?;
            if label != e.label || f.kind != kind {
                return Err(CliError::Runtime(format!(
                    "{} disagrees with the index; rerun `sonar-histnet extract`",
                    e.path.display()
                )));
            }
            Ok(normalize(&f, &stats)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let shape = cfg.features.padded_shape(kind);
    let mut sets = [FeatureSet::new(shape), FeatureSet::new(shape), FeatureSet::new(shape)];
    for (e, f) in entries.iter().zip(&loaded) {
        let label = classes.iter().position(|c| *c == e.label).expect("filtered");
        let slot = Split::ALL.iter().position(|s| *s == e.partition).expect("split");
        sets[slot].push(f, label, e.segment_id.clone())?;
    }
    let [train, val, test] = sets;
    for (name, set) in [("train", &train), ("val", &val), ("test", &test)] {
        if set.is_empty() {
            return Err(CliError::Usage(format!("the {} partition has no {} features", name, kind)));
        }
    }
    Ok(Partitions { train, val, test })
}

fn experiment_dir(output: &Path, model: ModelKind, feature: FeatureKind) -> PathBuf {
    output.join(format!("{}_{}", model, feature))
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let names = cfg.selected_class_names();
    let model_cfg = cfg.model_config();
    for &feature in &cfg.experiment.features {
        let data = load_partitions(cfg, feature)?;
        info!(
            "{}: {} train / {} val / {} test segments",
            feature,
            data.train.len(),
            data.val.len(),
            data.test.len()
        );
        for &model in &cfg.experiment.models {
            let dir = experiment_dir(&cfg.paths.output, model, feature);
            create_dir(&dir)?;
            let mut frozen = cfg.clone();
            frozen.experiment.models = vec![model];
            frozen.experiment.features = vec![feature];
            write_text(&dir.join(FROZEN_CONFIG), &frozen.to_toml())?;
            let summary = run_experiment(model, feature, &model_cfg, &cfg.train, &data, &names, &dir)?;
            info!(
                "{}/{}: accuracy {:.4} ± {:.4}, log-FDR {:.3}",
                model, feature, summary.accuracy.mean, summary.accuracy.std, summary.log_fdr.mean
            );
        }
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    for &feature in &cfg.experiment.features {
        for &model in &cfg.experiment.models {
            let dir = experiment_dir(&cfg.paths.output, model, feature);
            let summary_path = dir.join("summary.json");
            if !summary_path.is_file() {
                return Err(missing(&summary_path, "train"));
            }
            let frozen = config::resolve(Some(&dir.join(FROZEN_CONFIG)), &[])?;
            let prior = ExperimentSummary::read_json(&summary_path)?;
            let data = load_partitions(&frozen, feature)?;
            let model_cfg = frozen.model_config();
            let mut runs = Vec::with_capacity(prior.runs.len());
            for run in &prior.runs {
                let run_dir = dir.join(format!("run_{}", run.seed));
                let ckpt_path = run_dir.join("checkpoint.bin");
                if !ckpt_path.is_file() {
                    return Err(missing(&ckpt_path, "train"));
                }
                let net = load_model(model, &model_cfg, data.test.shape, &Checkpoint::load(&ckpt_path)?)?;
                let eval = evaluate_model(&net, &data.test, frozen.train.batch)?;
                let report = metrics_report(&eval, &data.test.labels, model_cfg.num_classes)?;
                write_text(&run_dir.join("metrics.json"), &report.to_json()?)?;
                report
                    .confusion
                    .write_csv(&run_dir.join("confusion.csv"), &prior.class_names)?;
                runs.push(RunRecord {
                    test: report,
                    ..run.clone()
                });
            }
            let summary = ExperimentSummary::from_runs(model, feature, prior.class_names, runs, prior.failed);
            summary.write_json(&summary_path)?;
            info!(
                "{}/{}: test accuracy {:.4} ± {:.4} over {} runs",
                model,
                feature,
                summary.accuracy.mean,
                summary.accuracy.std,
                summary.runs.len()
            );
        }
    }
    Ok(())
}

fn percent(m: &MeanStd) -> String {
    format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std)
}

fn plain(m: &MeanStd) -> String {
    format!("{:.2} ± {:.2}", m.mean, m.std)
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let output = &cfg.paths.output;
    let mut summaries = Vec::new();
    if let Ok(dirs) = std::fs::read_dir(output) {
        for d in dirs.flatten() {
            let p = d.path().join("summary.json");
            if p.is_file() {
                summaries.push(ExperimentSummary::read_json(&p)?);
            }
        }
    }
    if summaries.is_empty() {
        return Err(missing(&output.join("<model>_<feature>/summary.json"), "train"));
    }
    summaries.sort_by_key(|s| (s.feature.code(), s.model != ModelKind::Tdnn));
    let dir = output.join("report");
    create_dir(&dir)?;
    let table_path = dir.join("table1.csv");
    let mut w = csv::Writer::from_path(&table_path).map_err(histnet::Error::from)?;
    w.write_record(["Feature", "Model", "Accuracy", "Precision", "Recall", "F1", "MCC", "logFDR"])
        .map_err(histnet::Error::from)?;
    for s in &summaries {
        w.write_record([
            s.feature.as_str().to_uppercase(),
            s.model.to_string().to_uppercase(),
            percent(&s.accuracy),
            percent(&s.precision),
            percent(&s.recall),
            percent(&s.f1),
            percent(&s.mcc),
            plain(&s.log_fdr),
        ])
        .map_err(histnet::Error::from)?;
        ConfusionMatrix::from_counts(s.confusion.clone())?
            .write_csv(&dir.join(format!("confusion_{}_{}.csv", s.model, s.feature)), &s.class_names)?;
    }
    w.flush().map_err(|e| histnet::Error::io(&table_path, e))?;

    let fdr_path = dir.join("log_fdr_per_class.csv");
    let mut w = csv::Writer::from_path(&fdr_path).map_err(histnet::Error::from)?;
    let mut header = vec!["Feature".to_string(), "Model".to_string()];
    header.extend(summaries[0].class_names.iter().cloned());
    header.push("Overall".into());
    w.write_record(&header).map_err(histnet::Error::from)?;
    for s in summaries.iter().filter(|s| s.class_names == summaries[0].class_names) {
        let mut row = vec![s.feature.as_str().to_uppercase(), s.model.to_string().to_uppercase()];
        row.extend(s.per_class_log_fdr_mean.iter().map(|v| format!("{:.2}", v)));
        row.push(format!("{:.2}", s.log_fdr.mean));
        w.write_record(&row).map_err(histnet::Error::from)?;
    }
    w.flush().map_err(|e| histnet::Error::io(&fdr_path, e))?;
    info!("{} experiments -> {}", summaries.len(), table_path.display());
    Ok(())
}
