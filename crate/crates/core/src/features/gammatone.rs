//! 4th-order gammatone filterbank on an ERB-rate frequency grid.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use super::dsp::frame;
use super::FeatureConfig;
use crate::audio::SEGMENT_SECONDS;
use crate::error::Result;

pub const GFCC_FMIN: f64 = 50.0;
pub const GFCC_TAPS: usize = 2048;
/// Energy floor before `log10`; silent channels sit at `log10` of this.
pub const GFCC_LOG_FLOOR: f64 = 1e-10;
const ORDER: i32 = 4;
const BANDWIDTH: f64 = 1.019;

fn erb(f: f64) -> f64 {
    24.7 + 0.108 * f
}

fn erb_rate(f: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * f).log10()
}

fn erb_rate_inv(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

/// `n` centre frequencies equally spaced in ERB-rate from `fmin` to `fmax` inclusive.
pub fn erb_centers(n: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    if n == 1 {
        return vec![fmin];
    }
    let (lo, hi) = (erb_rate(fmin), erb_rate(fmax));
    (0..n)
        .map(|j| match j {
            0 => fmin,
            j if j == n - 1 => fmax,
            j => erb_rate_inv(lo + (hi - lo) * j as f64 / (n - 1) as f64),
        })
        .collect()
}

/// Impulse response scaled to unit gain at its centre frequency.
fn impulse(fc: f64, fs: f64) -> Vec<f64> {
    let b = 2.0 * PI * BANDWIDTH * erb(fc);
    let mut g: Vec<f64> = (0..GFCC_TAPS)
        .map(|n| {
            let t = n as f64 / fs;
            t.powi(ORDER - 1) * (-b * t).exp() * (2.0 * PI * fc * t).cos()
        })
        .collect();
    let w = 2.0 * PI * fc / fs;
    let gain = g
        .iter()
        .enumerate()
        .fold(Complex::new(0.0, 0.0), |acc, (n, v)| acc + Complex::from_polar(*v, -w * n as f64))
        .norm();
    for v in &mut g {
        *v /= gain;
    }
    g
}

struct Convolver {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Spectra of channel pairs packed as `G_a + i·G_b`.
    pairs: Vec<Vec<Complex<f64>>>,
}

impl Convolver {
    fn new(impulses: &[Vec<f64>], signal_len: usize) -> Self {
        let len = (signal_len + GFCC_TAPS - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let spectrum = |h: &[f64]| {
            let mut buf = vec![Complex::new(0.0, 0.0); len];
            for (b, v) in buf.iter_mut().zip(h) {
                b.re = *v;
            }
            forward.process(&mut buf);
            buf
        };
        let pairs = impulses
            .chunks(2)
            .map(|pair| {
                let a = spectrum(&pair[0]);
                match pair.get(1) {
                    Some(h) => a.iter().zip(spectrum(h)).map(|(x, y)| *x + Complex::<f64>::i() * y).collect(),
                    None => a,
                }
            })
            .collect();
        Convolver {
            len,
            forward,
            inverse,
            pairs,
        }
    }

    /// Causal filter outputs truncated to the signal length, one row per channel.
    fn filter(&self, samples: &[f32], channels: usize) -> Vec<Vec<f64>> {
        let mut x = vec![Complex::new(0.0, 0.0); self.len];
        for (b, v) in x.iter_mut().zip(samples) {
            b.re = *v as f64;
        }
        self.forward.process(&mut x);
        let scale = 1.0 / self.len as f64;
        let mut out = Vec::with_capacity(channels);
        for pair in &self.pairs {
            let mut y: Vec<Complex<f64>> = x.iter().zip(pair).map(|(a, b)| a * b).collect();
            self.inverse.process(&mut y);
            out.push(y[..samples.len()].iter().map(|c| c.re * scale).collect());
            if out.len() < channels {
                out.push(y[..samples.len()].iter().map(|c| c.im * scale).collect());
            }
        }
        out
    }
}

pub struct GammatoneBank {
    centers: Vec<f64>,
    impulses: Vec<Vec<f64>>,
    win: usize,
    hop: usize,
    /// Prepared for the standard segment length; other lengths plan on demand.
    convolver: Convolver,
}

impl GammatoneBank {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let fs = cfg.sample_rate as f64;
        let centers = erb_centers(cfg.gfcc_bins, GFCC_FMIN, fs / 2.0);
        let impulses: Vec<Vec<f64>> = centers.iter().map(|f| impulse(*f, fs)).collect();
        let segment_len = (SEGMENT_SECONDS * fs).round() as usize;
        let convolver = Convolver::new(&impulses, segment_len);
        GammatoneBank {
            centers,
            impulses,
            win: cfg.window_samples(),
            hop: cfg.hop_samples(),
            convolver,
        }
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Hann-windowed energy of every channel per frame (`[t][channel]`).
    pub fn energies(&self, samples: &[f32]) -> Result<Vec<Vec<f64>>> {
        let channels = self.centers.len();
        let outputs = if (samples.len() + GFCC_TAPS - 1).next_power_of_two() == self.convolver.len {
            self.convolver.filter(samples, channels)
        } else {
            Convolver::new(&self.impulses, samples.len()).filter(samples, channels)
        };
        let mut energies: Vec<Vec<f64>> = Vec::new();
        for (c, y) in outputs.iter().enumerate() {
            let frames = frame(y, self.win, self.hop)?;
            if energies.is_empty() {
                energies = vec![vec![0.0; channels]; frames.len()];
            }
            for (t, f) in frames.iter().enumerate() {
                energies[t][c] = f.iter().map(|v| v * v).sum();
            }
        }
        Ok(energies)
    }
}

pub(crate) fn log_energies(energies: &[f64]) -> Vec<f64> {
    energies.iter().map(|e| e.max(GFCC_LOG_FLOOR).log10()).collect()
}
