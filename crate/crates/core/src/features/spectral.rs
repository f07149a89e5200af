//! Banded STFT magnitudes and HTK mel filterbank energies.

use super::dsp::{frame, PowerSpectrum};
use super::FeatureConfig;
use crate::error::Result;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Band of one-sided bin `i` when `bins` bins are split into `bands` equal contiguous bands.
pub fn band_of_bin(i: usize, bins: usize, bands: usize) -> usize {
    i * bands / bins
}

/// Triangular HTK-mel filters (peak 1) over `0..sample_rate/2`, sampled at the
/// `n_fft` one-sided bin frequencies. Returns `(rows, center_hz)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> (Vec<Vec<f64>>, Vec<f64>) {
    let bins = n_fft / 2 + 1;
    let fmax = sample_rate as f64 / 2.0;
    let mmax = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mmax * i as f64 / (n_mels + 1) as f64))
        .collect();
    let rows = (0..n_mels)
        .map(|j| {
            let (lo, mid, hi) = (edges[j], edges[j + 1], edges[j + 2]);
            (0..bins)
                .map(|i| {
                    let f = i as f64 * sample_rate as f64 / n_fft as f64;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect();
    (rows, edges[1..=n_mels].to_vec())
}

pub(crate) struct Spectral {
    win: usize,
    hop: usize,
    spectrum: PowerSpectrum,
    band: Vec<usize>,
    band_sizes: Vec<usize>,
    /// Nonzero span and weights of each mel filter.
    mel: Vec<(usize, Vec<f64>)>,
}

impl Spectral {
    pub(crate) fn new(cfg: &FeatureConfig) -> Self {
        let win = cfg.window_samples();
        let spectrum = PowerSpectrum::new(win);
        let bins = spectrum.bins();
        let band: Vec<usize> = (0..bins).map(|i| band_of_bin(i, bins, cfg.stft_bins)).collect();
        let mut band_sizes = vec![0; cfg.stft_bins];
        for b in &band {
            band_sizes[*b] += 1;
        }
        let (rows, _) = mel_filterbank(cfg.n_mels, win, cfg.sample_rate);
        let mel = rows
            .into_iter()
            .map(|row| {
                let start = row.iter().position(|w| *w > 0.0).unwrap_or(0);
                let end = row.iter().rposition(|w| *w > 0.0).map_or(start, |e| e + 1);
                (start, row[start..end].to_vec())
            })
            .collect();
        Spectral {
            win,
            hop: cfg.hop_samples(),
            spectrum,
            band,
            band_sizes,
            mel,
        }
    }

    pub(crate) fn power_frames(&self, samples: &[f32]) -> Result<Vec<Vec<f64>>> {
        Ok(frame(samples, self.win, self.hop)?
            .iter()
            .map(|f| self.spectrum.compute(f))
            .collect())
    }

    /// Mean magnitude within each linear-frequency band.
    pub(crate) fn bands(&self, power: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.band_sizes.len()];
        for (p, b) in power.iter().zip(&self.band) {
            out[*b] += p.sqrt();
        }
        for (o, n) in out.iter_mut().zip(&self.band_sizes) {
            *o /= *n as f64;
        }
        out
    }

    pub(crate) fn mel(&self, power: &[f64]) -> Vec<f64> {
        self.mel
            .iter()
            .map(|(start, w)| w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum())
            .collect()
    }
}
