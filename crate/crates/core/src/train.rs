//! Training with Adagrad and early stopping, evaluation, and multi-seed experiments.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adagrad, Checkpoint, Tape, Tensor, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, TimeFrequencyFeature};
use crate::metrics::{export_embeddings, extended_f64, extended_f64_vec, fdr, ConfusionMatrix, MetricsReport};
use crate::models::{Model, ModelConfig, ModelKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    /// When false, every epoch runs and the final parameters are kept.
    pub early_stopping: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lr: 1e-3,
            batch: 128,
            epochs: 100,
            patience: 10,
            seeds: vec![0, 1, 2],
            early_stopping: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("lr, batch, epochs and patience must all be positive"));
        }
        if self.patience > self.epochs {
            return Err(Error::invalid(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        Ok(())
    }
}

/// A validation loss must drop below the best so far by more than this to count.
pub const IMPROVEMENT_TOL: f64 = 1e-6;

/// Patience-based stopping on validation loss; epochs are 1-based.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's validation loss and returns whether it improved.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best - IMPROVEMENT_TOL {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// Labelled feature maps of one shape, stored contiguously.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub shape: (usize, usize),
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl FeatureSet {
    pub fn new(shape: (usize, usize)) -> Self {
        FeatureSet {
            shape,
            ..Default::default()
        }
    }

    pub fn push(&mut self, feature: &TimeFrequencyFeature, label: usize, id: impl Into<String>) -> Result<()> {
        if (feature.freq_bins, feature.time_frames) != self.shape {
            return Err(Error::shape(
                "feature set",
                format!(
                    "{}x{} feature in a {}x{} set",
                    feature.freq_bins, feature.time_frames, self.shape.0, self.shape.1
                ),
            ));
        }
        self.data.extend_from_slice(&feature.data);
        self.labels.push(label);
        self.ids.push(id.into());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    /// N×1×F×T batch of the given rows.
    pub fn batch(&self, rows: &[usize]) -> Tensor<f32> {
        let k = self.sample_len();
        let mut data = Vec::with_capacity(rows.len() * k);
        for r in rows {
            data.extend_from_slice(&self.data[r * k..(r + 1) * k]);
        }
        Tensor::new(vec![rows.len(), 1, self.shape.0, self.shape.1], data).expect("batch extent")
    }

    pub fn subset(&self, rows: &[usize]) -> FeatureSet {
        let k = self.sample_len();
        let mut out = FeatureSet::new(self.shape);
        for r in rows {
            out.data.extend_from_slice(&self.data[r * k..(r + 1) * k]);
            out.labels.push(self.labels[*r]);
            out.ids.push(self.ids[*r].clone());
        }
        out
    }
}

/// Samples per gradient shard. Shards are reduced in a fixed order, so results
/// do not depend on the number of worker threads.
const SHARD: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch (or the last epoch without early stopping).
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub curves: Vec<CurvePoint>,
}

fn shard_rng(seed: u64, epoch: usize, batch: usize, shard: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 40) | ((batch as u64) << 16) | shard as u64);
    rng
}

/// Mean loss and summed gradients of one mini-batch.
fn batch_gradients(model: &Model, data: &FeatureSet, rows: &[usize], seed: u64, epoch: usize, index: usize) -> Result<(f64, Vec<Vec<f32>>)> {
    let total = rows.len() as f64;
    let shards: Vec<(f64, Vec<Vec<f32>>)> = rows
        .par_chunks(SHARD)
        .enumerate()
        .map(|(s, chunk)| {
            let mut tape = Tape::new();
            let vars = model.params.register(&mut tape, true);
            let x = tape.leaf(data.batch(chunk), false);
            let labels: Vec<usize> = chunk.iter().map(|r| data.labels[*r]).collect();
            let mut rng = shard_rng(seed, epoch, index, s);
            let out = model.forward(&mut tape, &vars, x, true, &mut rng)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let value = tape.value(loss).data()[0] as f64;
            tape.backward(loss)?;
            Ok((value * chunk.len() as f64 / total, model.params.gradients(&tape, &vars)))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f32>> = model.params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    for ((l, g), chunk) in shards.iter().zip(rows.chunks(SHARD)) {
        loss += l;
        let w = (chunk.len() as f64 / total) as f32;
        for (acc, part) in grads.iter_mut().zip(g) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += w * p;
            }
        }
    }
    Ok((loss, grads))
}

/// Trains one model. Only the training and validation sets are visible here.
pub fn train(
    kind: ModelKind,
    config: &ModelConfig,
    hp: &HyperParams,
    seed: u64,
    train_set: &FeatureSet,
    val_set: &FeatureSet,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Training("training and validation sets must be non-empty".into()));
    }
    if train_set.shape != val_set.shape {
        return Err(Error::shape("train", "training and validation feature shapes differ"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::build(kind, config, train_set.shape, &mut init_rng)?;
    if let Some(bad) = train_set.labels.iter().chain(&val_set.labels).find(|l| **l >= config.num_classes) {
        return Err(Error::Training(format!("label {} outside {} classes", bad, config.num_classes)));
    }
    let mut opt = Adagrad::new(&model.params, hp.lr, DEFAULT_EPS);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(hp.patience);
    let mut best = (model.params.clone(), opt.accumulators().to_vec());
    let mut curves = Vec::new();
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut train_loss = 0.0;
        for (b, rows) in order.chunks(hp.batch).enumerate() {
            let (loss, grads) = batch_gradients(&model, train_set, rows, seed, epoch, b)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite training loss {} at epoch {} batch {} (seed {})",
                    loss, epoch, b, seed
                )));
            }
            opt.step(&mut model.params, &grads)?;
            train_loss += loss * rows.len() as f64;
        }
        train_loss /= train_set.len() as f64;
        let val_loss = evaluate(&model, val_set, hp.batch)?.loss;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {} (seed {})", epoch, seed)));
        }
        curves.push(CurvePoint {
            epoch,
            train_loss,
            val_loss,
        });
        log::debug!("seed {} epoch {}: train {:.5} val {:.5}", seed, epoch, train_loss, val_loss);
        if !hp.early_stopping {
            continue;
        }
        if stopper.observe(epoch, val_loss) {
            best = (model.params.clone(), opt.accumulators().to_vec());
        }
        if stopper.should_stop() {
            log::info!("seed {}: stopping after epoch {} (best {})", seed, epoch, stopper.best_epoch());
            break;
        }
    }
    let best_epoch = if hp.early_stopping {
        model.params = best.0;
        stopper.best_epoch()
    } else {
        best = (model.params.clone(), opt.accumulators().to_vec());
        curves.len()
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params: model.params.clone(),
            accumulators: best.1,
        },
        model,
        best_epoch,
        curves,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    /// Row-major N×`dim` penultimate features.
    pub embeddings: Vec<f32>,
    pub dim: usize,
    /// Mean cross-entropy.
    pub loss: f64,
}

/// Eval-mode pass over a whole set. Batches are independent, so the result
/// does not depend on batch order.
pub fn evaluate(model: &Model, data: &FeatureSet, batch: usize) -> Result<Evaluation> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<(Vec<usize>, Vec<f32>, f64)> = rows
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let mut tape = Tape::new();
            let vars = model.params.register(&mut tape, false);
            let x = tape.leaf(data.batch(chunk), false);
            let out = model.forward(&mut tape, &vars, x, false, &mut ChaCha8Rng::seed_from_u64(0))?;
            let labels: Vec<usize> = chunk.iter().map(|r| data.labels[*r]).collect();
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let logits = tape.value(out.logits);
            let k = logits.shape()[1];
            let preds = logits
                .data()
                .chunks(k)
                .map(|row| (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
                .collect();
            Ok((preds, tape.value(out.embedding).data().to_vec(), tape.value(loss).data()[0] as f64 * chunk.len() as f64))
        })
        .collect::<Result<_>>()?;
    let mut eval = Evaluation {
        predictions: Vec::with_capacity(data.len()),
        embeddings: Vec::new(),
        dim: model.embed_dim(),
        loss: 0.0,
    };
    for (p, e, l) in parts {
        eval.predictions.extend(p);
        eval.embeddings.extend(e);
        eval.loss += l;
    }
    eval.loss /= data.len().max(1) as f64;
    Ok(eval)
}

/// Confusion-based scores plus FDR of the embeddings (NaN when a class has fewer than two samples).
pub fn metrics_report(eval: &Evaluation, labels: &[usize], classes: usize) -> Result<MetricsReport> {
    let cm = ConfusionMatrix::from_predictions(&eval.predictions, labels, classes)?;
    let emb: Vec<f64> = eval.embeddings.iter().map(|v| *v as f64).collect();
    let report = match fdr(&emb, eval.dim, labels, classes) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("FDR unavailable: {}", e);
            None
        }
    };
    Ok(MetricsReport::new(cm, report.as_ref()))
}

/// Train, validation and test sets for one feature kind.
#[derive(Clone, Debug)]
pub struct Partitions {
    pub train: FeatureSet,
    pub val: FeatureSet,
    pub test: FeatureSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    #[serde(with = "extended_f64")]
    pub mean: f64,
    #[serde(with = "extended_f64")]
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    if values.iter().all(|v| *v == values[0]) {
        return MeanStd { mean: values[0], std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub model: ModelKind,
    pub feature: FeatureKind,
    pub class_names: Vec<String>,
    pub runs: Vec<RunRecord>,
    pub failed: Vec<FailedRun>,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub mcc: MeanStd,
    pub log_fdr: MeanStd,
    #[serde(with = "extended_f64_vec")]
    pub per_class_log_fdr_mean: Vec<f64>,
    /// Test confusion counts summed over completed runs.
    pub confusion: Vec<Vec<u64>>,
}

impl ExperimentSummary {
    pub fn from_runs(
        model: ModelKind,
        feature: FeatureKind,
        class_names: Vec<String>,
        runs: Vec<RunRecord>,
        failed: Vec<FailedRun>,
    ) -> Self {
        let stat = |f: fn(&MetricsReport) -> f64| mean_std(&runs.iter().map(|r| f(&r.test)).collect::<Vec<_>>());
        let classes = class_names.len();
        let mut confusion = vec![vec![0u64; classes]; classes];
        for r in &runs {
            for (row, src) in confusion.iter_mut().zip(r.test.confusion.counts()) {
                for (a, b) in row.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        let per_class_log_fdr_mean = (0..classes)
            .map(|c| mean_std(&runs.iter().map(|r| r.test.per_class_fdr[c]).collect::<Vec<_>>()).mean)
            .collect();
        ExperimentSummary {
            model,
            feature,
            class_names,
            accuracy: stat(|m| m.accuracy),
            precision: stat(|m| m.precision),
            recall: stat(|m| m.recall),
            f1: stat(|m| m.f1),
            mcc: stat(|m| m.mcc),
            log_fdr: stat(|m| m.overall_fdr),
            per_class_log_fdr_mean,
            confusion,
            runs,
            failed,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_curves(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in curves {
        w.serialize(c)?;
    }
    if curves.is_empty() {
        w.write_record(["epoch", "train_loss", "val_loss"])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Trains, checkpoints and evaluates one seed, writing `run_<seed>/` under `out_dir`.
pub fn run_seed(
    kind: ModelKind,
    config: &ModelConfig,
    hp: &HyperParams,
    seed: u64,
    data: &Partitions,
    out_dir: &Path,
) -> Result<RunRecord> {
    let outcome = train(kind, config, hp, seed, &data.train, &data.val)?;
    let dir = out_dir.join(format!("run_{}", seed));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    outcome.checkpoint.save(&dir.join("checkpoint.bin"))?;
    write_curves(&dir.join("curves.csv"), &outcome.curves)?;
    // The test set is touched only here, after training has finished.
    let eval = evaluate(&outcome.model, &data.test, hp.batch)?;
    let report = metrics_report(&eval, &data.test.labels, config.num_classes)?;
    let metrics_path = dir.join("metrics.json");
    std::fs::write(&metrics_path, report.to_json()?).map_err(|e| Error::io(&metrics_path, e))?;
    export_embeddings(&dir.join("embeddings.csv"), &eval.embeddings, eval.dim, &data.test.labels)?;
    Ok(RunRecord {
        seed,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.curves.len(),
        test: report,
    })
}

/// One run per seed, aggregated into `summary.json`. A failed seed is recorded
/// and the remaining runs are still aggregated.
pub fn run_experiment(
    kind: ModelKind,
    feature: FeatureKind,
    config: &ModelConfig,
    hp: &HyperParams,
    data: &Partitions,
    class_names: &[String],
    out_dir: &Path,
) -> Result<ExperimentSummary> {
    hp.validate()?;
    if class_names.len() != config.num_classes {
        return Err(Error::invalid(format!(
            "{} class names for {} classes",
            class_names.len(),
            config.num_classes
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for &seed in &hp.seeds {
        match run_seed(kind, config, hp, seed, data, out_dir) {
            Ok(r) => {
                log::info!("{}/{} seed {}: test accuracy {:.4}", kind, feature, seed, r.test.accuracy);
                runs.push(r);
            }
            Err(e) => {
                log::error!("{}/{} seed {} failed: {}", kind, feature, seed, e);
                failed.push(FailedRun {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    if runs.is_empty() {
        return Err(Error::Training(format!("every seed failed; first error: {}", failed[0].error)));
    }
    let summary = ExperimentSummary::from_runs(kind, feature, class_names.to_vec(), runs, failed);
    summary.write_json(&out_dir.join("summary.json"))?;
    Ok(summary)
}

/// Rebuilds a trained model from a checkpoint.
pub fn load_model(kind: ModelKind, config: &ModelConfig, input_shape: (usize, usize), checkpoint: &Checkpoint) -> Result<Model> {
    let mut model = Model::build(kind, config, input_shape, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.check_params(&checkpoint.params)?;
    model.params = checkpoint.params.clone();
    Ok(model)
}
