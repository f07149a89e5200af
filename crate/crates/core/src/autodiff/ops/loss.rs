use crate::autodiff::tape::{Op, Tape, Var};
use crate::autodiff::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub(crate) fn softmax_cross_entropy_backward<T: Real>(probs: &[T], labels: &[usize], g: &[T]) -> Vec<T> {
    let n = labels.len();
    let c = probs.len() / n;
    let scale = g[0].f64() / n as f64;
    let mut grad = Vec::with_capacity(probs.len());
    for (i, &label) in labels.iter().enumerate() {
        for k in 0..c {
            let target = if k == label { 1.0 } else { 0.0 };
            grad.push(T::of((probs[i * c + k].f64() - target) * scale));
        }
    }
    grad
}

impl<T: Real> Tape<T> {
    /// Mean softmax cross-entropy of N×C `logits` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} for {} labels", s, labels.len()),
            ));
        }
        let c = s[1];
        if let Some(bad) = labels.iter().find(|l| **l >= c) {
            return Err(Error::invalid(format!("label {} out of range for {} classes", bad, c)));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(z.len());
        let mut total = 0f64;
        for (row, &label) in z.chunks(c).zip(labels) {
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[label].f64();
            probs.extend(row.iter().map(|v| T::of((v.f64() - lse).exp())));
        }
        let loss = Tensor::scalar(T::of(total / labels.len() as f64));
        self.push(
            "softmax_cross_entropy",
            loss,
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }
}
