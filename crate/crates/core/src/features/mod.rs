//! Time-frequency front ends: mel spectrogram, MFCC, banded STFT, GFCC, CQT and VQT.

mod cache;
mod cqt;
pub mod dsp;
mod gammatone;
mod spectral;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{read_feature, read_index, write_feature, write_index, IndexEntry};
pub use cqt::{cqt_bandwidths, cqt_frequencies, cqt_kernel_lengths, ConstantQ};
pub use gammatone::{erb_centers, GammatoneBank, GFCC_FMIN, GFCC_LOG_FLOOR, GFCC_TAPS};
pub use spectral::{band_of_bin, hz_to_mel, mel_filterbank, mel_to_hz};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Ms,
    Mfcc,
    Stft,
    Gfcc,
    Cqt,
    Vqt,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 6] = [
        FeatureKind::Ms,
        FeatureKind::Mfcc,
        FeatureKind::Stft,
        FeatureKind::Gfcc,
        FeatureKind::Cqt,
        FeatureKind::Vqt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Ms => "ms",
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::Stft => "stft",
            FeatureKind::Gfcc => "gfcc",
            FeatureKind::Cqt => "cqt",
            FeatureKind::Vqt => "vqt",
        }
    }

    /// Byte tag used in the feature cache.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown feature kind '{}' (expected ms, mfcc, stft, gfcc, cqt or vqt)", s)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub stft_bins: usize,
    pub gfcc_bins: usize,
    pub cqt_bins: usize,
    pub vqt_bins: usize,
    pub pad_time: usize,
    pub db_floor: f64,
    pub sample_rate: u32,
    pub cqt_fmin: f64,
    pub bins_per_octave: usize,
    pub vqt_gamma: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window_ms: 250.0,
            hop_ms: 64.0,
            n_mels: 40,
            n_mfcc: 16,
            stft_bins: 48,
            gfcc_bins: 64,
            cqt_bins: 64,
            vqt_bins: 64,
            pad_time: 48,
            db_floor: -80.0,
            sample_rate: 16_000,
            cqt_fmin: 32.70,
            bins_per_octave: 12,
            vqt_gamma: 4.66,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn top_db(&self) -> f64 {
        -self.db_floor
    }

    /// Frequency rows produced before padding.
    pub fn raw_bins(&self, kind: FeatureKind) -> usize {
        match kind {
            FeatureKind::Ms => self.n_mels,
            FeatureKind::Mfcc => self.n_mfcc,
            FeatureKind::Stft => self.stft_bins,
            FeatureKind::Gfcc => self.gfcc_bins,
            FeatureKind::Cqt => self.cqt_bins,
            FeatureKind::Vqt => self.vqt_bins,
        }
    }

    /// `(F, T)` after zero padding; the mel spectrogram shares the STFT height.
    pub fn padded_shape(&self, kind: FeatureKind) -> (usize, usize) {
        let f = match kind {
            FeatureKind::Ms => self.stft_bins,
            other => self.raw_bins(other),
        };
        (f, self.pad_time)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("feature config: {}", m)));
        if self.sample_rate == 0 || self.window_samples() < 2 || self.hop_samples() == 0 {
            return bad("sample_rate, window_ms and hop_ms must be positive".into());
        }
        if self.db_floor >= 0.0 || !self.db_floor.is_finite() {
            return bad(format!("db_floor must be negative, got {}", self.db_floor));
        }
        for kind in FeatureKind::ALL {
            if self.raw_bins(kind) == 0 {
                return bad(format!("{} needs at least one frequency bin", kind));
            }
        }
        if self.n_mels > self.stft_bins {
            return bad(format!("n_mels {} exceeds padded height {}", self.n_mels, self.stft_bins));
        }
        if self.n_mfcc > self.n_mels {
            return bad(format!("n_mfcc {} exceeds n_mels {}", self.n_mfcc, self.n_mels));
        }
        if self.stft_bins > self.window_samples() / 2 + 1 {
            return bad(format!("stft_bins {} exceeds the one-sided spectrum", self.stft_bins));
        }
        if self.cqt_fmin <= 0.0 || self.bins_per_octave == 0 || self.vqt_gamma < 0.0 {
            return bad("cqt_fmin and bins_per_octave must be positive and vqt_gamma non-negative".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let top = cqt_frequencies(self.cqt_fmin, self.bins_per_octave, self.cqt_bins.max(self.vqt_bins));
        if top.last().is_some_and(|f| *f >= nyquist) {
            return bad(format!("highest constant-Q bin must lie below {} Hz", nyquist));
        }
        if GFCC_FMIN >= nyquist {
            return bad("sample rate too low for the gammatone bank".into());
        }
        Ok(())
    }
}

/// An `F × T` feature map, stored row-major (frequency rows, time columns).
///
/// `valid_freq × valid_time` is the unpadded region; padded cells hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeFrequencyFeature {
    pub kind: FeatureKind,
    pub data: Vec<f32>,
    pub freq_bins: usize,
    pub time_frames: usize,
    pub valid_freq: usize,
    pub valid_time: usize,
    pub normalized: bool,
}

impl TimeFrequencyFeature {
    /// Builds a padded map from per-frame rows (`frames[t][f]`).
    fn from_frames(kind: FeatureKind, frames: &[Vec<f64>], shape: (usize, usize)) -> Result<Self> {
        let (f_pad, t_pad) = shape;
        let valid_time = frames.len();
        let valid_freq = frames.first().map_or(0, Vec::len);
        if valid_time > t_pad || valid_freq > f_pad {
            return Err(Error::invalid(format!(
                "{} feature of {}x{} does not fit the {}x{} padded shape",
                kind, valid_freq, valid_time, f_pad, t_pad
            )));
        }
        let mut data = vec![0f32; f_pad * t_pad];
        for (t, row) in frames.iter().enumerate() {
            for (f, v) in row.iter().enumerate() {
                data[f * t_pad + t] = *v as f32;
            }
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature extraction"));
        }
        Ok(TimeFrequencyFeature {
            kind,
            data,
            freq_bins: f_pad,
            time_frames: t_pad,
            valid_freq,
            valid_time,
            normalized: false,
        })
    }

    pub fn get(&self, f: usize, t: usize) -> f32 {
        self.data[f * self.time_frames + t]
    }

    fn valid_values(&self) -> impl Iterator<Item = f32> + '_ {
        (0..self.valid_freq).flat_map(move |f| (0..self.valid_time).map(move |t| self.get(f, t)))
    }
}

enum Plan {
    Spectral(spectral::Spectral),
    Gammatone(GammatoneBank),
    ConstantQ(ConstantQ),
}

/// Extractor for one feature kind with its filterbanks and FFT plans precomputed.
pub struct FeatureExtractor {
    kind: FeatureKind,
    cfg: FeatureConfig,
    plan: Plan,
}

impl FeatureExtractor {
    pub fn new(kind: FeatureKind, cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = match kind {
            FeatureKind::Ms | FeatureKind::Mfcc | FeatureKind::Stft => Plan::Spectral(spectral::Spectral::new(cfg)),
            FeatureKind::Gfcc => Plan::Gammatone(GammatoneBank::new(cfg)),
            FeatureKind::Cqt => Plan::ConstantQ(ConstantQ::new(cfg, cfg.cqt_bins, 0.0)),
            FeatureKind::Vqt => Plan::ConstantQ(ConstantQ::new(cfg, cfg.vqt_bins, cfg.vqt_gamma)),
        };
        Ok(FeatureExtractor {
            kind,
            cfg: cfg.clone(),
            plan,
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Per-frame values before log compression: band magnitudes (STFT), mel
    /// powers (MS, MFCC), gammatone energies (GFCC) or kernel magnitudes (CQT, VQT).
    pub fn linear(&self, samples: &[f32]) -> Result<Vec<Vec<f64>>> {
        let frames = match &self.plan {
            Plan::Spectral(s) => {
                let power = s.power_frames(samples)?;
                match self.kind {
                    FeatureKind::Stft => power.iter().map(|p| s.bands(p)).collect(),
                    _ => power.iter().map(|p| s.mel(p)).collect(),
                }
            }
            Plan::Gammatone(g) => g.energies(samples)?,
            Plan::ConstantQ(c) => c.magnitudes(samples)?,
        };
        if frames.len() > self.cfg.pad_time {
            return Err(Error::invalid(format!(
                "{} frames exceed pad_time {}; segment is too long",
                frames.len(),
                self.cfg.pad_time
            )));
        }
        Ok(frames)
    }

    pub fn extract(&self, samples: &[f32]) -> Result<TimeFrequencyFeature> {
        let mut frames = self.linear(samples)?;
        let top_db = self.cfg.top_db();
        match self.kind {
            FeatureKind::Stft | FeatureKind::Cqt | FeatureKind::Vqt => db_in_place(&mut frames, |v| dsp::amplitude_to_db(v, top_db)),
            FeatureKind::Ms => db_in_place(&mut frames, |v| dsp::power_to_db(v, top_db)),
            FeatureKind::Mfcc => {
                db_in_place(&mut frames, |v| dsp::power_to_db(v, top_db));
                let dct = dsp::Dct::new(self.cfg.n_mels, self.cfg.n_mfcc);
                frames = frames.iter().map(|f| dct.forward(f)).collect();
            }
            FeatureKind::Gfcc => {
                let dct = dsp::Dct::new(self.cfg.gfcc_bins, self.cfg.gfcc_bins);
                frames = frames.iter().map(|f| dct.forward(&gammatone::log_energies(f))).collect();
            }
        }
        TimeFrequencyFeature::from_frames(self.kind, &frames, self.cfg.padded_shape(self.kind))
    }
}

/// Applies a whole-feature dB conversion to frame-major data.
fn db_in_place(frames: &mut [Vec<f64>], convert: impl Fn(&mut [f64])) {
    let width = frames.first().map_or(0, Vec::len);
    let mut flat: Vec<f64> = frames.iter().flatten().copied().collect();
    convert(&mut flat);
    for (row, chunk) in frames.iter_mut().zip(flat.chunks(width.max(1))) {
        row.copy_from_slice(chunk);
    }
}

/// Global z-score statistics for one feature kind, taken over the unpadded region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub kind: FeatureKind,
    pub mean: f64,
    pub std: f64,
    pub valid_freq: usize,
    pub valid_time: usize,
}

pub const STD_FLOOR: f64 = 1e-6;

/// Streaming accumulator for [`NormStats`].
#[derive(Clone, Debug)]
pub struct NormAccumulator {
    kind: FeatureKind,
    sum: f64,
    sum_sq: f64,
    count: u64,
    valid: Option<(usize, usize)>,
}

impl NormAccumulator {
    pub fn new(kind: FeatureKind) -> Self {
        NormAccumulator {
            kind,
            sum: 0.0,
            sum_sq: 0.0,
            count: 0,
            valid: None,
        }
    }

    pub fn add(&mut self, feature: &TimeFrequencyFeature) -> Result<()> {
        if feature.kind != self.kind {
            return Err(Error::invalid(format!(
                "cannot accumulate {} features into {} statistics",
                feature.kind, self.kind
            )));
        }
        let valid = (feature.valid_freq, feature.valid_time);
        match self.valid {
            None => self.valid = Some(valid),
            Some(v) if v != valid => {
                return Err(Error::invalid(format!(
                    "inconsistent {} feature extents {:?} and {:?}",
                    self.kind, v, valid
                )))
            }
            _ => {}
        }
        for v in feature.valid_values() {
            let v = v as f64;
            self.sum += v;
            self.sum_sq += v * v;
            self.count += 1;
        }
        Ok(())
    }

    /// Folds in another accumulator's sums; merging in a fixed order keeps results reproducible.
    pub fn merge(&mut self, other: &NormAccumulator) -> Result<()> {
        if other.kind != self.kind {
            return Err(Error::invalid(format!(
                "cannot merge {} statistics into {} statistics",
                other.kind, self.kind
            )));
        }
        match (self.valid, other.valid) {
            (_, None) => return Ok(()),
            (Some(a), Some(b)) if a != b => {
                return Err(Error::invalid(format!(
                    "inconsistent {} feature extents {:?} and {:?}",
                    self.kind, a, b
                )))
            }
            _ => self.valid = other.valid,
        }
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<NormStats> {
        let (valid_freq, valid_time) = self.valid.ok_or_else(|| Error::invalid("no training features to normalize with"))?;
        if self.count == 0 {
            return Err(Error::invalid("training features have no valid cells"));
        }
        let n = self.count as f64;
        let mean = self.sum / n;
        let var = (self.sum_sq / n - mean * mean).max(0.0);
        Ok(NormStats {
            kind: self.kind,
            mean,
            std: var.sqrt().max(STD_FLOOR),
            valid_freq,
            valid_time,
        })
    }
}

impl NormStats {
    pub fn compute<'a>(kind: FeatureKind, features: impl IntoIterator<Item = &'a TimeFrequencyFeature>) -> Result<Self> {
        let mut acc = NormAccumulator::new(kind);
        for f in features {
            acc.add(f)?;
        }
        acc.finish()
    }
}

/// `(x − mean) / std` over the valid region; padded cells stay 0.
pub fn normalize(feature: &TimeFrequencyFeature, stats: &NormStats) -> Result<TimeFrequencyFeature> {
    if feature.kind != stats.kind {
        return Err(Error::invalid(format!(
            "normalization statistics are for {} but the feature is {}",
            stats.kind, feature.kind
        )));
    }
    if stats.valid_freq > feature.freq_bins || stats.valid_time > feature.time_frames {
        return Err(Error::invalid(format!(
            "statistics cover {}x{} cells but the feature is {}x{}",
            stats.valid_freq, stats.valid_time, feature.freq_bins, feature.time_frames
        )));
    }
    let mut out = feature.clone();
    let t_pad = feature.time_frames;
    for (i, v) in out.data.iter_mut().enumerate() {
        let (f, t) = (i / t_pad, i % t_pad);
        *v = if f < stats.valid_freq && t < stats.valid_time {
            ((*v as f64 - stats.mean) / stats.std) as f32
        } else {
            0.0
        };
    }
    out.valid_freq = stats.valid_freq;
    out.valid_time = stats.valid_time;
    out.normalized = true;
    Ok(out)
}
