//! Deterministic four-class corpus: two tonal classes with distinct spectra and
//! two broadband classes that share a spectrum and differ only in amplitude
//! statistics.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{decode_wav, write_wav, NUM_CLASSES, SEGMENT_SECONDS, TARGET_RATE};
use crate::dataset::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::features::dsp::{hann, PowerSpectrum};

pub const SYNTH_CLASSES: [&str; NUM_CLASSES] = ["tonal400", "tonal900", "gaussian", "laplacian"];
pub const TARGET_RMS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_signals_per_class: usize,
    pub signal_duration_s: f64,
    pub seed: u64,
    /// Fundamentals of the two tonal classes in Hz.
    pub tonal_hz: [f64; 2],
    pub harmonics: usize,
    /// Tonal-to-pink-noise power ratio in dB.
    pub tonal_snr_db: f64,
    /// Pass band of the shaping filter shared by the broadband classes.
    pub band_hz: [f64; 2],
    /// Samples over which the heavy-tailed class holds its variance constant; 1 gives i.i.d. Laplacian samples.
    pub texture_block: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_signals_per_class: 40,
            signal_duration_s: 30.0,
            seed: 0,
            tonal_hz: [400.0, 900.0],
            harmonics: 4,
            tonal_snr_db: 0.0,
            band_hz: [300.0, 3000.0],
            texture_block: 8,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = TARGET_RATE as f64 / 2.0;
        if self.n_signals_per_class < 3 {
            return Err(Error::invalid("n_signals_per_class must be at least 3 so every split gets a signal"));
        }
        if !(self.signal_duration_s >= 1.0) {
            return Err(Error::invalid("signal_duration_s must be at least 1 s"));
        }
        if self.harmonics == 0 || self.tonal_hz.iter().any(|f| *f <= 0.0 || *f * self.harmonics as f64 >= nyquist) {
            return Err(Error::invalid("tonal harmonics must lie strictly between 0 Hz and Nyquist"));
        }
        if !(0.0 < self.band_hz[0] && self.band_hz[0] < self.band_hz[1] && self.band_hz[1] < nyquist) {
            return Err(Error::invalid("band_hz must be increasing and below Nyquist"));
        }
        if self.texture_block == 0 {
            return Err(Error::invalid("texture_block must be positive"));
        }
        Ok(())
    }

    fn samples(&self) -> usize {
        (self.signal_duration_s * TARGET_RATE as f64).round() as usize
    }
}

/// Multiplies the spectrum of `x` by a real gain (circular, zero phase).
fn shape(x: &[f64], gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = x.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(*v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *c *= gain(bin as f64 * TARGET_RATE as f64 / n as f64);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn band_gain(band: [f64; 2]) -> impl Fn(f64) -> f64 {
    move |f: f64| {
        if f == 0.0 {
            return 0.0;
        }
        let high_pass = 1.0 / (1.0 + (band[0] / f).powi(4));
        let low_pass = 1.0 / (1.0 + (f / band[1]).powi(4));
        (high_pass * low_pass).sqrt()
    }
}

fn pink_gain(f: f64) -> f64 {
    if f < 20.0 {
        0.0
    } else {
        1.0 / f.sqrt()
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn scale_to(x: &mut [f64], target: f64) {
    let r = rms(x);
    if r > 0.0 {
        for v in x.iter_mut() {
            *v *= target / r;
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// One signal of `class`, RMS-normalized.
pub fn synthesize(spec: &SynthSpec, class: usize, index: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((class * 1_000_003 + index) as u64);
    let n = spec.samples();
    let mut x = match class {
        0 | 1 => {
            let f0 = spec.tonal_hz[class];
            let mut noise = shape(&gaussian(&mut rng, n), pink_gain);
            scale_to(&mut noise, 1.0);
            let mut tone = vec![0.0; n];
            for h in 1..=spec.harmonics {
                let phase = rng.random::<f64>() * 2.0 * PI;
                let w = 2.0 * PI * f0 * h as f64 / TARGET_RATE as f64;
                for (i, v) in tone.iter_mut().enumerate() {
                    *v += (w * i as f64 + phase).sin() / h as f64;
                }
            }
            scale_to(&mut tone, 10f64.powf(spec.tonal_snr_db / 20.0));
            tone.iter().zip(&noise).map(|(a, b)| a + b).collect()
        }
        2 => shape(&gaussian(&mut rng, n), band_gain(spec.band_hz)),
        _ => {
            // Gaussian scale mixture with exponential variance: Laplacian marginals.
            let mut g = gaussian(&mut rng, n);
            for block in g.chunks_mut(spec.texture_block) {
                let sigma: f64 = Distribution::<f64>::sample(&Exp1, &mut rng).sqrt();
                block.iter_mut().for_each(|v| *v *= sigma);
            }
            shape(&g, band_gain(spec.band_hz))
        }
    };
    scale_to(&mut x, TARGET_RMS);
    x.into_iter().map(|v| v as f32).collect()
}

/// Writes `<class>/<class>_<i>.wav` files and `manifest.csv` under `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..NUM_CLASSES)
        .flat_map(|c| (0..spec.n_signals_per_class).map(move |i| (c, i)))
        .collect();
    for name in SYNTH_CLASSES {
        let dir = out_dir.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let entries = jobs
        .par_iter()
        .map(|&(class, i)| {
            let record_id = format!("{}_{:03}", SYNTH_CLASSES[class], i);
            let path: PathBuf = out_dir.join(SYNTH_CLASSES[class]).join(format!("{}.wav", record_id));
            write_wav(&path, &synthesize(spec, class, i), TARGET_RATE)?;
            Ok(ManifestEntry {
                record_id,
                path,
                label: class,
                duration_s: spec.samples() as f64 / TARGET_RATE as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(entries, SYNTH_CLASSES.iter().map(|s| s.to_string()).collect())?;
    manifest.write_csv(&out_dir.join("manifest.csv"), Some(out_dir))?;
    log::info!("wrote {} synthetic signals to {}", jobs.len(), out_dir.display());
    Ok(manifest)
}

const WELCH_LEN: usize = 512;
const WELCH_BANDS: usize = 32;

/// Mean Welch periodogram (Hann, 50% overlap) averaged into equal-width bands.
pub fn welch_bands(x: &[f32]) -> Vec<f64> {
    let w = hann(WELCH_LEN);
    let ps = PowerSpectrum::new(WELCH_LEN);
    let mut acc = vec![0.0; ps.bins()];
    let mut count = 0;
    for start in (0..x.len().saturating_sub(WELCH_LEN - 1)).step_by(WELCH_LEN / 2) {
        let frame: Vec<f64> = (0..WELCH_LEN).map(|i| w[i] * x[start + i] as f64).collect();
        for (a, p) in acc.iter_mut().zip(ps.compute(&frame)) {
            *a += p;
        }
        count += 1;
    }
    let mut bands = vec![0.0; WELCH_BANDS];
    let per = (ps.bins() - 1) / WELCH_BANDS;
    // Skip DC; bins 1..=256 fill 32 bands of 8.
    for (b, band) in bands.iter_mut().enumerate() {
        *band = acc[1 + b * per..1 + (b + 1) * per].iter().sum::<f64>() / (per * count.max(1)) as f64;
    }
    bands
}

/// Sample excess kurtosis.
pub fn excess_kurtosis(x: &[f32]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| *v as f64).sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for v in x {
        let d = *v as f64 - mean;
        m2 += d * d;
        m4 += d.powi(4);
    }
    (m4 / n) / (m2 / n).powi(2) - 3.0
}

pub fn spectral_centroid(bands: &[f64]) -> f64 {
    let total: f64 = bands.iter().sum();
    bands.iter().enumerate().map(|(i, p)| (i as f64 + 0.5) * p).sum::<f64>() / total
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    /// Largest |C − D| difference of the class-mean Welch spectra, in dB.
    pub cd_max_band_diff_db: f64,
    pub kurtosis: [f64; NUM_CLASSES],
    pub tonal_peak_bands: [usize; 2],
    pub centroid_tonal_vs_broadband: f64,
    pub centroid_c_vs_d: f64,
    pub periodogram_c_vs_d: f64,
    pub kurtosis_c_vs_d: f64,
    pub failures: Vec<String>,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Accuracy of `value > threshold ⇒ positive` with the threshold at the midpoint of the class means.
fn midpoint_accuracy(neg: &[f64], pos: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mn, mp) = (mean(neg), mean(pos));
    let t = 0.5 * (mn + mp);
    let above = |v: f64| if mp >= mn { v > t } else { v < t };
    let correct = neg.iter().filter(|v| !above(**v)).count() + pos.iter().filter(|v| above(**v)).count();
    correct as f64 / (neg.len() + pos.len()) as f64
}

/// Leave-one-out nearest-class-mean accuracy.
fn nearest_mean_accuracy(neg: &[Vec<f64>], pos: &[Vec<f64>]) -> f64 {
    let dim = neg[0].len();
    let sum = |set: &[Vec<f64>]| {
        let mut s = vec![0.0; dim];
        for v in set {
            for (a, b) in s.iter_mut().zip(v) {
                *a += b;
            }
        }
        s
    };
    let (sn, sp) = (sum(neg), sum(pos));
    let dist = |v: &[f64], s: &[f64], n: f64| -> f64 { v.iter().zip(s).map(|(a, b)| (a - b / n).powi(2)).sum() };
    let mut correct = 0;
    for (set, own, other) in [(neg, &sn, &sp), (pos, &sp, &sn)] {
        let (n_own, n_other) = (set.len() as f64 - 1.0, (neg.len() + pos.len() - set.len()) as f64);
        for v in set {
            let held: Vec<f64> = own.iter().zip(v).map(|(s, x)| s - x).collect();
            if dist(v, &held, n_own) < dist(v, other, n_other) {
                correct += 1;
            }
        }
    }
    correct as f64 / (neg.len() + pos.len()) as f64
}

/// Checks that C and D match spectrally but differ in kurtosis, and that
/// spectrum-only classifiers cannot tell them apart.
///
/// The spectral classifiers score every 3 s segment; the kurtosis classifier
/// scores whole signals.
pub fn sanity_probe(manifest: &DatasetManifest) -> Result<ProbeReport> {
    let seg_len = (SEGMENT_SECONDS * TARGET_RATE as f64) as usize;
    let mut signal_bands: Vec<Vec<Vec<f64>>> = vec![Vec::new(); NUM_CLASSES];
    let mut segment_bands: Vec<Vec<Vec<f64>>> = vec![Vec::new(); NUM_CLASSES];
    let mut kurt: Vec<Vec<f64>> = vec![Vec::new(); NUM_CLASSES];
    let measured = manifest
        .entries
        .par_iter()
        .map(|e| {
            let s = decode_wav(&e.path, &e.record_id, e.label)?;
            let segs: Vec<Vec<f64>> = s.samples.chunks_exact(seg_len).map(welch_bands).collect();
            Ok((e.label, welch_bands(&s.samples), segs, excess_kurtosis(&s.samples)))
        })
        .collect::<Result<Vec<_>>>()?;
    for (label, b, segs, k) in measured {
        signal_bands[label].push(b);
        segment_bands[label].extend(segs);
        kurt[label].push(k);
    }
    if segment_bands.iter().any(|b| b.len() < 2) || signal_bands.iter().any(|b| b.len() < 2) {
        return Err(Error::invalid("sanity probe needs at least two signals and segments per class"));
    }
    let class_mean = |set: &[Vec<f64>]| -> Vec<f64> {
        (0..WELCH_BANDS)
            .map(|i| set.iter().map(|v| v[i]).sum::<f64>() / set.len() as f64)
            .collect()
    };
    let (mc, md) = (class_mean(&signal_bands[2]), class_mean(&signal_bands[3]));
    let cd_max_band_diff_db = mc
        .iter()
        .zip(&md)
        .map(|(c, d)| (10.0 * (c / d).log10()).abs())
        .fold(0.0, f64::max);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let kurtosis = [mean(&kurt[0]), mean(&kurt[1]), mean(&kurt[2]), mean(&kurt[3])];
    let peak = |m: &[f64]| (0..m.len()).max_by(|a, b| m[*a].total_cmp(&m[*b])).unwrap();
    let tonal_peak_bands = [peak(&class_mean(&signal_bands[0])), peak(&class_mean(&signal_bands[1]))];

    let centroids: Vec<Vec<f64>> = segment_bands
        .iter()
        .map(|set| set.iter().map(|b| spectral_centroid(b)).collect())
        .collect();
    let tonal: Vec<f64> = centroids[0].iter().chain(&centroids[1]).copied().collect();
    let broadband: Vec<f64> = centroids[2].iter().chain(&centroids[3]).copied().collect();
    // Spectral shape only: each segment's bands scaled to unit total power.
    let shapes = |set: &[Vec<f64>]| -> Vec<Vec<f64>> {
        set.iter()
            .map(|b| {
                let total: f64 = b.iter().sum();
                b.iter().map(|p| p / total).collect()
            })
            .collect()
    };
    let report = ProbeReport {
        cd_max_band_diff_db,
        kurtosis,
        tonal_peak_bands,
        centroid_tonal_vs_broadband: midpoint_accuracy(&tonal, &broadband),
        centroid_c_vs_d: midpoint_accuracy(&centroids[2], &centroids[3]),
        periodogram_c_vs_d: nearest_mean_accuracy(&shapes(&segment_bands[2]), &shapes(&segment_bands[3])),
        kurtosis_c_vs_d: midpoint_accuracy(&kurt[2], &kurt[3]),
        failures: Vec::new(),
    };
    Ok(with_failures(report))
}

fn with_failures(mut r: ProbeReport) -> ProbeReport {
    let mut fail = |cond: bool, msg: String| {
        if !cond {
            r.failures.push(msg);
        }
    };
    fail(r.cd_max_band_diff_db < 1.0, format!("C/D spectra differ by {:.2} dB", r.cd_max_band_diff_db));
    fail(
        (r.kurtosis[3] - r.kurtosis[2]).abs() > 1.5,
        format!("C/D excess kurtosis gap is only {:.2}", (r.kurtosis[3] - r.kurtosis[2]).abs()),
    );
    fail(r.tonal_peak_bands[0] != r.tonal_peak_bands[1], "tonal classes peak in the same band".into());
    fail(
        r.centroid_tonal_vs_broadband >= 0.9,
        format!("centroid separates tonal from broadband at only {:.3}", r.centroid_tonal_vs_broadband),
    );
    fail(r.centroid_c_vs_d <= 0.6, format!("centroid separates C from D at {:.3}", r.centroid_c_vs_d));
    fail(r.periodogram_c_vs_d <= 0.6, format!("periodogram separates C from D at {:.3}", r.periodogram_c_vs_d));
    fail(r.kurtosis_c_vs_d >= 0.9, format!("kurtosis separates C from D at only {:.3}", r.kurtosis_c_vs_d));
    r
}
