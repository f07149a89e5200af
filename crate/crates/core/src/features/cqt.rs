//! Constant-Q and variable-Q transforms with explicit per-bin kernels.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;

use super::dsp::{frame_count, hann};
use super::FeatureConfig;
use crate::error::{Error, Result};

pub fn cqt_frequencies(fmin: f64, bins_per_octave: usize, bins: usize) -> Vec<f64> {
    (0..bins)
        .map(|k| fmin * 2f64.powf(k as f64 / bins_per_octave as f64))
        .collect()
}

fn quality(bins_per_octave: usize) -> f64 {
    1.0 / (2f64.powf(1.0 / bins_per_octave as f64) - 1.0)
}

/// Bandwidth `f_k / Q + γ` of every bin in Hz.
pub fn cqt_bandwidths(cfg: &FeatureConfig, bins: usize, gamma: f64) -> Vec<f64> {
    let q = quality(cfg.bins_per_octave);
    cqt_frequencies(cfg.cqt_fmin, cfg.bins_per_octave, bins)
        .iter()
        .map(|f| f / q + gamma)
        .collect()
}

/// Kernel length `ceil(fs / B_k)` of every bin.
pub fn cqt_kernel_lengths(cfg: &FeatureConfig, bins: usize, gamma: f64) -> Vec<usize> {
    cqt_bandwidths(cfg, bins, gamma)
        .iter()
        .map(|b| (cfg.sample_rate as f64 / b).ceil() as usize)
        .collect()
}

/// Precomputed Hann-windowed complex exponentials, one per bin, normalized by
/// the window sum so a unit sinusoid at `f_k` yields magnitude 0.5.
pub struct ConstantQ {
    kernels: Vec<Vec<Complex<f64>>>,
    hop: usize,
}

impl ConstantQ {
    /// `gamma = 0` gives the constant-Q transform.
    pub fn new(cfg: &FeatureConfig, bins: usize, gamma: f64) -> Self {
        let fs = cfg.sample_rate as f64;
        let freqs = cqt_frequencies(cfg.cqt_fmin, cfg.bins_per_octave, bins);
        let kernels = freqs
            .iter()
            .zip(cqt_kernel_lengths(cfg, bins, gamma))
            .map(|(f, n)| {
                let w = hann(n);
                let sum: f64 = w.iter().sum();
                w.iter()
                    .enumerate()
                    .map(|(i, v)| Complex::from_polar(v / sum, -2.0 * PI * f * i as f64 / fs))
                    .collect()
            })
            .collect();
        ConstantQ {
            kernels,
            hop: cfg.hop_samples(),
        }
    }

    /// Kernel magnitudes per frame (`[t][bin]`); kernels are centred on `t·hop`
    /// and see zeros beyond the signal.
    pub fn magnitudes(&self, samples: &[f32]) -> Result<Vec<Vec<f64>>> {
        if samples.is_empty() {
            return Err(Error::invalid("constant-Q transform of an empty signal"));
        }
        let len = samples.len() as isize;
        Ok((0..frame_count(samples.len(), self.hop))
            .map(|t| {
                let centre = (t * self.hop) as isize;
                self.kernels
                    .iter()
                    .map(|k| {
                        let start = centre - (k.len() / 2) as isize;
                        let lo = (-start).max(0) as usize;
                        let hi = ((len - start).max(0) as usize).min(k.len());
                        let mut acc = Complex::new(0.0, 0.0);
                        for i in lo..hi {
                            acc += k[i] * samples[(start + i as isize) as usize] as f64;
                        }
                        acc.norm()
                    })
                    .collect()
            })
            .collect())
    }
}
