use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_EPS: f64 = 1e-10;

/// Adagrad with per-entry squared-gradient accumulators.
///
/// `G += g²; θ -= lr · g / (√G + eps)`
#[derive(Clone, Debug, PartialEq)]
pub struct Adagrad {
    pub lr: f64,
    pub eps: f64,
    accumulators: Vec<Tensor<f32>>,
}

impl Adagrad {
    pub fn new(params: &ParamStore<f32>, lr: f64, eps: f64) -> Self {
        Adagrad {
            lr,
            eps,
            accumulators: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn with_accumulators(
        params: &ParamStore<f32>,
        lr: f64,
        eps: f64,
        accumulators: Vec<Tensor<f32>>,
    ) -> Result<Self> {
        let ok = accumulators.len() == params.len()
            && params
                .iter()
                .zip(&accumulators)
                .all(|((_, p), a)| p.shape() == a.shape());
        if !ok {
            return Err(Error::shape("adagrad", "accumulators do not match parameters"));
        }
        Ok(Adagrad {
            lr,
            eps,
            accumulators,
        })
    }

    pub fn accumulators(&self) -> &[Tensor<f32>] {
        &self.accumulators
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != self.accumulators.len() {
            return Err(Error::shape(
                "adagrad",
                format!("{} gradients for {} parameters", grads.len(), self.accumulators.len()),
            ));
        }
        for ((theta, acc), g) in params.tensors_mut().zip(&mut self.accumulators).zip(grads) {
            if g.len() != theta.len() || acc.len() != theta.len() {
                return Err(Error::shape(
                    "adagrad",
                    format!("gradient of {} for parameter of {}", g.len(), theta.len()),
                ));
            }
            for ((t, a), g) in theta.data_mut().iter_mut().zip(acc.data_mut()).zip(g) {
                let g = *g as f64;
                let sum = *a as f64 + g * g;
                *a = sum as f32;
                *t = (*t as f64 - self.lr * g / (sum.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}
