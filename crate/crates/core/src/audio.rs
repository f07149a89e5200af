//! WAV ingestion, band-limited resampling and fixed-length segmentation.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Rate every segment is cut at.
pub const TARGET_RATE: u32 = 16_000;
pub const SEGMENT_SECONDS: f64 = 3.0;
pub const NUM_CLASSES: usize = 4;

/// A labelled mono recording.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    pub record_id: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub label: usize,
}

impl AudioSignal {
    pub fn new(record_id: impl Into<String>, samples: Vec<f32>, sample_rate: u32, label: usize) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("audio signal has no samples"));
        }
        if label >= NUM_CLASSES {
            return Err(Error::invalid(format!("label {} outside 0..{}", label, NUM_CLASSES)));
        }
        Ok(AudioSignal {
            record_id: record_id.into(),
            samples,
            sample_rate,
            label,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// A fixed-length window cut from an [`AudioSignal`].
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub record_id: String,
    pub index: usize,
    pub samples: Vec<f32>,
    pub label: usize,
}

impl Segment {
    /// `<record_id>_<index>`, zero-padded so ids sort in time order.
    pub fn id(&self) -> String {
        format!("{}_{:04}", self.record_id, self.index)
    }
}

/// Decodes PCM WAV (16/24/32-bit integer or 32-bit float) and averages channels to mono.
pub fn decode_wav(path: &Path, record_id: &str, label: usize) -> Result<AudioSignal> {
    let wav_err = |message: String| Error::Wav {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(wav_err("zero channels".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(e.to_string()))?
        }
        (format, bits) => {
            return Err(wav_err(format!("unsupported encoding {:?} {}-bit", format, bits)));
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(wav_err("sample data ends mid-frame".into()));
    }
    let samples: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| (frame.iter().map(|v| *v as f64).sum::<f64>() / channels as f64) as f32)
            .collect()
    };
    AudioSignal::new(record_id, samples, spec.sample_rate, label).map_err(|e| wav_err(e.to_string()))
}

/// Writes mono 32-bit float WAV.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for s in samples {
        w.write_sample(*s).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Zero crossings of the interpolation kernel on each side, at the output cutoff.
const SINC_ZERO_CROSSINGS: f64 = 32.0;
const KAISER_BETA: f64 = 8.6;
/// Up to this many phases the kernel is tabulated once.
const MAX_TABLE_PHASES: u64 = 4096;

struct Kernel {
    /// Cutoff relative to the input Nyquist rate.
    cutoff: f64,
    half_width: f64,
    i0_beta: f64,
}

impl Kernel {
    fn value(&self, tau: f64) -> f64 {
        if tau.abs() >= self.half_width {
            return 0.0;
        }
        let x = self.cutoff * tau;
        let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
        let r = tau / self.half_width;
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.i0_beta;
        self.cutoff * sinc * window
    }

    /// Unit-DC-gain taps for input indices `base - reach + 1 ..= base + reach`
    /// around fractional position `frac` past `base`.
    fn taps(&self, frac: f64, reach: usize) -> Vec<f64> {
        let mut taps: Vec<f64> = (0..2 * reach)
            .map(|k| self.value(k as f64 - (reach as f64 - 1.0) - frac))
            .collect();
        let sum: f64 = taps.iter().sum();
        if sum != 0.0 {
            taps.iter_mut().for_each(|t| *t /= sum);
        }
        taps
    }
}

/// Band-limited rational-ratio resampling (Kaiser-windowed sinc, polyphase).
///
/// The anti-aliasing cutoff sits at the lower of the two Nyquist rates and the
/// output has `round(N · target / source)` samples.
pub fn resample(signal: &AudioSignal, target_rate: u32) -> Result<AudioSignal> {
    if target_rate == 0 {
        return Err(Error::invalid("target rate must be positive"));
    }
    if signal.sample_rate == target_rate {
        return Ok(signal.clone());
    }
    let g = gcd(signal.sample_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = signal.sample_rate as u64 / g;
    let n_in = signal.samples.len();
    let n_out = ((n_in as u128 * up as u128 + down as u128 / 2) / down as u128) as usize;

    let cutoff = (up as f64 / down as f64).min(1.0);
    let half_width = SINC_ZERO_CROSSINGS / cutoff;
    let kernel = Kernel {
        cutoff,
        half_width,
        i0_beta: bessel_i0(KAISER_BETA),
    };
    let reach = half_width.ceil() as usize;
    let table: Option<Vec<Vec<f64>>> = (up <= MAX_TABLE_PHASES)
        .then(|| (0..up).map(|p| kernel.taps(p as f64 / up as f64, reach)).collect());

    let x = &signal.samples;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out as u64 {
        let pos = j * down;
        let base = (pos / up) as isize;
        let phase = pos % up;
        let owned;
        let taps = match &table {
            Some(t) => &t[phase as usize],
            None => {
                owned = kernel.taps(phase as f64 / up as f64, reach);
                &owned
            }
        };
        let start = base - reach as isize + 1;
        let mut acc = 0f64;
        for (k, w) in taps.iter().enumerate() {
            let idx = start + k as isize;
            if idx >= 0 && (idx as usize) < n_in {
                acc += w * x[idx as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    AudioSignal::new(signal.record_id.clone(), out, target_rate, signal.label)
}

/// Consecutive non-overlapping windows of `duration_s`; a shorter remainder is dropped.
pub fn segment(signal: &AudioSignal, duration_s: f64) -> Result<Vec<Segment>> {
    if signal.sample_rate != TARGET_RATE {
        return Err(Error::invalid(format!(
            "segmenting expects {} Hz audio, got {} Hz",
            TARGET_RATE, signal.sample_rate
        )));
    }
    let len_f = duration_s * TARGET_RATE as f64;
    if !(len_f >= 1.0) || (len_f - len_f.round()).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "segment duration {} s is not a whole number of samples",
            duration_s
        )));
    }
    let len = len_f.round() as usize;
    Ok(signal
        .samples
        .chunks_exact(len)
        .enumerate()
        .map(|(index, chunk)| Segment {
            record_id: signal.record_id.clone(),
            index,
            samples: chunk.to_vec(),
            label: signal.label,
        })
        .collect())
}
