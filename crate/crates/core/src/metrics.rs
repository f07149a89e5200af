//! Confusion matrices, macro-averaged classification scores, multiclass
//! MCC, and Fisher's discriminant ratio over embeddings.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Guard added to the within-class scatter norm.
pub const FDR_EPSILON: f64 = 1e-12;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("confusion matrix must be square and non-empty"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut cm = Self::new(classes);
        for (&p, &t) in preds.iter().zip(labels) {
            if p >= classes || t >= classes {
                return Err(Error::invalid(format!(
                    "class index ({}, {}) out of range for {} classes",
                    t, p, classes
                )));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|k| self.counts[k][k]).sum()
    }

    /// Per-class true counts (row sums).
    pub fn true_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Per-class predicted counts (column sums).
    pub fn predicted_totals(&self) -> Vec<u64> {
        (0..self.classes())
            .map(|k| self.counts.iter().map(|r| r[k]).sum())
            .collect()
    }

    pub fn write_csv(&self, path: &Path, class_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(class_names.iter().cloned());
        w.write_record(&header)?;
        for (k, row) in self.counts.iter().enumerate() {
            let name = class_names.get(k).cloned().unwrap_or_else(|| k.to_string());
            let mut rec = vec![name];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy plus unweighted class means of precision, recall and F1.
///
/// Any 0/0 is taken as 0.
pub fn classification_scores(cm: &ConfusionMatrix) -> ClassificationScores {
    let c = cm.classes();
    let (rows, cols) = (cm.true_totals(), cm.predicted_totals());
    let precision: Vec<f64> = (0..c).map(|k| ratio(cm.get(k, k), cols[k])).collect();
    let recall: Vec<f64> = (0..c).map(|k| ratio(cm.get(k, k), rows[k])).collect();
    let f1: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(p, r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / c as f64;
    ClassificationScores {
        accuracy: ratio(cm.trace(), cm.total()),
        precision: mean(&precision),
        recall: mean(&recall),
        f1: mean(&f1),
        per_class_precision: precision,
        per_class_recall: recall,
        per_class_f1: f1,
    }
}

/// Multiclass Matthews correlation (Gorodkin's R_K); 0 when undefined.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    let c = cm.trace() as f64;
    let p = cm.predicted_totals();
    let t = cm.true_totals();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| *a as f64 * *b as f64).sum();
    let pp: f64 = p.iter().map(|a| (*a as f64).powi(2)).sum();
    let tt: f64 = t.iter().map(|a| (*a as f64).powi(2)).sum();
    let den = ((s * s - pp) * (s * s - tt)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (c * s - pt) / den
    }
}

/// Fisher's discriminant ratio per class and overall, with their natural logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdrReport {
    pub per_class_ratio: Vec<f64>,
    /// `ln` of each ratio; `-inf` when the class mean coincides with the global mean.
    #[serde(with = "extended_f64_vec")]
    pub per_class_log: Vec<f64>,
    pub overall_ratio: f64,
    #[serde(with = "extended_f64")]
    pub overall_log: f64,
    pub between_norm: Vec<f64>,
    pub within_norm: Vec<f64>,
    /// Classes whose within-class scatter vanished, so the ratio saturated.
    pub perfectly_compact: Vec<bool>,
}

/// Frobenius norm of `Σ vᵢvᵢᵀ` for the rows of an n×d matrix, via the smaller Gram product.
fn scatter_norm(rows: &[f64], n: usize, d: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let m = n.min(d);
    let mut gram = vec![0f64; m * m];
    // SAFETY: operand extents are n×d (row-major) and m×m.
    unsafe {
        if n <= d {
            matrixmultiply::dgemm(
                n, d, n, 1.0, rows.as_ptr(), d as isize, 1, rows.as_ptr(), 1, d as isize, 0.0,
                gram.as_mut_ptr(), m as isize, 1,
            );
        } else {
            matrixmultiply::dgemm(
                d, n, d, 1.0, rows.as_ptr(), 1, d as isize, rows.as_ptr(), d as isize, 1, 0.0,
                gram.as_mut_ptr(), m as isize, 1,
            );
        }
    }
    gram.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// FDR over an N×d embedding matrix (row-major).
///
/// Per class: `‖S_B‖_F / (‖S_W‖_F + ε)` with `S_B = N_c (μ_c-μ)(μ_c-μ)ᵀ` and
/// `S_W = Σ (x-μ_c)(x-μ_c)ᵀ`; the overall ratio is the sum over classes.
pub fn fdr(embeddings: &[f64], dim: usize, labels: &[usize], classes: usize) -> Result<FdrReport> {
    if dim == 0 || embeddings.len() != labels.len() * dim {
        return Err(Error::invalid(format!(
            "{} values cannot hold {} embeddings of dimension {}",
            embeddings.len(),
            labels.len(),
            dim
        )));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::invalid(format!("label {} out of range", l)));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|n| *n < 2) {
        return Err(Error::invalid(format!(
            "class {} has {} samples; FDR needs at least 2",
            c, counts[c]
        )));
    }
    let n = labels.len();
    let mut global = vec![0f64; dim];
    let mut means = vec![vec![0f64; dim]; classes];
    for (row, &l) in embeddings.chunks(dim).zip(labels) {
        for k in 0..dim {
            global[k] += row[k];
            means[l][k] += row[k];
        }
    }
    global.iter_mut().for_each(|v| *v /= n as f64);
    for (m, &cnt) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= cnt as f64);
    }

    let mut report = FdrReport {
        per_class_ratio: Vec::with_capacity(classes),
        per_class_log: Vec::with_capacity(classes),
        overall_ratio: 0.0,
        overall_log: 0.0,
        between_norm: Vec::with_capacity(classes),
        within_norm: Vec::with_capacity(classes),
        perfectly_compact: Vec::with_capacity(classes),
    };
    for c in 0..classes {
        let diff: f64 = means[c].iter().zip(&global).map(|(a, b)| (a - b).powi(2)).sum();
        let between = counts[c] as f64 * diff;
        let centred: Vec<f64> = embeddings
            .chunks(dim)
            .zip(labels)
            .filter(|(_, l)| **l == c)
            .flat_map(|(row, _)| row.iter().zip(&means[c]).map(|(x, m)| x - m))
            .collect();
        let within = scatter_norm(&centred, counts[c], dim);
        let r = between / (within + FDR_EPSILON);
        report.between_norm.push(between);
        report.within_norm.push(within);
        report.perfectly_compact.push(within == 0.0);
        report.per_class_ratio.push(r);
        report.per_class_log.push(r.ln());
    }
    report.overall_ratio = report.per_class_ratio.iter().sum();
    report.overall_log = report.overall_ratio.ln();
    Ok(report)
}

/// Everything reported for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    #[serde(with = "extended_f64_vec")]
    pub per_class_fdr: Vec<f64>,
    #[serde(with = "extended_f64")]
    pub overall_fdr: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    /// Log-FDR fields are NaN when `fdr` is `None` (too few samples per class).
    pub fn new(cm: ConfusionMatrix, fdr: Option<&FdrReport>) -> Self {
        let s = classification_scores(&cm);
        let classes = cm.classes();
        MetricsReport {
            accuracy: s.accuracy,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            mcc: mcc(&cm),
            per_class_fdr: fdr.map_or(vec![f64::NAN; classes], |f| f.per_class_log.clone()),
            overall_fdr: fdr.map_or(f64::NAN, |f| f.overall_log),
            confusion: cm,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes `label,e_0,…,e_{d-1}` rows for an external projection tool.
pub fn export_embeddings(path: &Path, embeddings: &[f32], dim: usize, labels: &[usize]) -> Result<()> {
    if dim == 0 || embeddings.len() != labels.len() * dim {
        return Err(Error::invalid("embedding matrix does not match labels"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "label").map_err(io)?;
    for k in 0..dim {
        write!(w, ",e_{}", k).map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for (row, l) in embeddings.chunks(dim).zip(labels) {
        write!(w, "{}", l).map_err(io)?;
        for v in row {
            write!(w, ",{}", v).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a file written by [`export_embeddings`]; returns `(embeddings, dim, labels)`.
pub fn read_embeddings(path: &Path) -> Result<(Vec<f32>, usize, Vec<usize>)> {
    let mut r = csv::Reader::from_path(path)?;
    let dim = r.headers()?.len().saturating_sub(1);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |m: &str| Error::Format {
            format: "embedding CSV",
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        labels.push(rec[0].parse().map_err(|_| bad("bad label"))?);
        for f in rec.iter().skip(1) {
            values.push(f.parse().map_err(|_| bad("bad value"))?);
        }
    }
    Ok((values, dim, labels))
}

/// Non-finite floats as strings ("inf", "-inf", "nan") so JSON stays valid.
pub(crate) mod extended_f64 {
    use super::*;

    pub fn to_value(v: f64) -> serde_json::Value {
        if v.is_finite() {
            serde_json::json!(v)
        } else if v.is_nan() {
            serde_json::json!("nan")
        } else if v > 0.0 {
            serde_json::json!("inf")
        } else {
            serde_json::json!("-inf")
        }
    }

    pub fn from_value<E: serde::de::Error>(v: &serde_json::Value) -> std::result::Result<f64, E> {
        match v {
            serde_json::Value::Number(n) => n.as_f64().ok_or_else(|| E::custom("bad number")),
            serde_json::Value::String(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("unexpected float token {}", other))),
            },
            _ => Err(E::custom("expected number or float token")),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_value(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        from_value(&serde_json::Value::deserialize(d)?)
    }
}

pub(crate) mod extended_f64_vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| extended_f64::to_value(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        Vec::<serde_json::Value>::deserialize(d)?
            .iter()
            .map(extended_f64::from_value)
            .collect()
    }
}

