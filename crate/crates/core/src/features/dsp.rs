//! Framing, spectra, decibel scaling and the DCT shared by the extractors.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::error::{Error, Result};

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Number of centered frames for a signal of `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len / hop + 1
}

/// Index into the signal after reflect padding, without repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Centered, reflect-padded, Hann-windowed frames. Frame `k` covers samples
/// `k·hop − win/2 .. k·hop + win/2` of the original signal.
pub fn frame<S: Copy + Into<f64>>(samples: &[S], win: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if win == 0 || hop == 0 {
        return Err(Error::invalid("window and hop must be positive"));
    }
    if samples.len() <= win / 2 {
        return Err(Error::invalid(format!(
            "signal of {} samples is too short for reflect padding of {}",
            samples.len(),
            win / 2
        )));
    }
    let w = hann(win);
    let half = (win / 2) as isize;
    Ok((0..frame_count(samples.len(), hop))
        .map(|k| {
            let start = (k * hop) as isize - half;
            (0..win)
                .map(|n| w[n] * samples[reflect(start + n as isize, samples.len())].into())
                .collect()
        })
        .collect())
}

/// Reusable forward FFT producing one-sided power spectra.
pub struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
    n: usize,
}

impl PowerSpectrum {
    pub fn new(n: usize) -> Self {
        PowerSpectrum {
            fft: FftPlanner::new().plan_fft_forward(n),
            n,
        }
    }

    pub fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    /// `|X_k|²` for `k = 0..=n/2`.
    pub fn compute(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|v| Complex::new(*v, 0.0)).collect();
        buf.resize(self.n, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf[..self.bins()].iter().map(|c| c.norm_sqr()).collect()
    }
}

pub const AMPLITUDE_EPS: f64 = 1e-4;
pub const POWER_EPS: f64 = 1e-8;

/// `20·log10(max(x, eps))` for amplitudes, then clamped to `top_db` below the maximum.
pub fn amplitude_to_db(values: &mut [f64], top_db: f64) {
    for v in values.iter_mut() {
        *v = 20.0 * v.max(AMPLITUDE_EPS).log10();
    }
    clamp_top(values, top_db);
}

/// `10·log10(max(p, eps))` for powers, then clamped like [`amplitude_to_db`].
pub fn power_to_db(values: &mut [f64], top_db: f64) {
    for v in values.iter_mut() {
        *v = 10.0 * v.max(POWER_EPS).log10();
    }
    clamp_top(values, top_db);
}

fn clamp_top(values: &mut [f64], top_db: f64) {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = max - top_db;
    for v in values.iter_mut() {
        *v = v.max(floor);
    }
}

/// Orthonormal DCT-II as a `keep × n` matrix.
pub struct Dct {
    n: usize,
    keep: usize,
    basis: Vec<f64>,
}

impl Dct {
    pub fn new(n: usize, keep: usize) -> Self {
        let keep = keep.min(n);
        let mut basis = Vec::with_capacity(keep * n);
        for k in 0..keep {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                basis.push(s * (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos());
            }
        }
        Dct { n, keep, basis }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "DCT input length");
        self.basis
            .chunks(self.n)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Transpose of [`forward`](Self::forward); the exact inverse when no coefficients are dropped.
    pub fn inverse(&self, c: &[f64]) -> Vec<f64> {
        assert_eq!(c.len(), self.keep, "DCT coefficient count");
        let mut x = vec![0.0; self.n];
        for (row, ck) in self.basis.chunks(self.n).zip(c) {
            for (xi, b) in x.iter_mut().zip(row) {
                *xi += ck * b;
            }
        }
        x
    }
}
