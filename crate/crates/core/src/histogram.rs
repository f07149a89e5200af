//! Learnable soft-binning histogram layer.
//!
//! Each input channel `d` is compared against `B` bins with centre `μ[b,d]`
//! and width `γ[b,d]`; a value votes `exp(-γ²(x-μ)²)` for a bin, and votes
//! are averaged over an S×T window:
//!
//! ```text
//! Y[r,c,b,d] = 1/(S·T) · Σ_s Σ_t exp(-γ[b,d]² · (x[r+s, c+t, d] - μ[b,d])²)
//! ```
//!
//! Two routes compute the same quantity. [`Tape::histogram`] evaluates the
//! sum directly with a hand-derived backward pass. [`Tape::histogram_factored`]
//! chains generic operators: a grouped 1×1 convolution with unit weights and
//! bias `-μ`, a per-map scale by `γ`, square, negated exponential, and average
//! pooling. Output channel `b·D + d` carries bin `b` of input channel `d`.

use crate::autodiff::{Op, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const CENTERS_PARAM: &str = "hist.centers";
pub const WIDTHS_PARAM: &str = "hist.widths";

/// Pooling extent of the vote aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistWindow {
    /// One window covering the whole feature map.
    Global,
    Local {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
}

impl HistWindow {
    /// Resolves to `(kernel, stride)` for an H×W map.
    pub fn resolve(self, h: usize, w: usize) -> Result<((usize, usize), (usize, usize))> {
        let (kernel, stride) = match self {
            HistWindow::Global => ((h, w), (1, 1)),
            HistWindow::Local { kernel, stride } => (kernel, stride),
        };
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid(format!(
                "histogram window {:?} stride {:?}",
                kernel, stride
            )));
        }
        if kernel.0 > h || kernel.1 > w {
            return Err(Error::shape(
                "histogram",
                format!("window {:?} larger than input {}x{}", kernel, h, w),
            ));
        }
        Ok((kernel, stride))
    }

    /// Window positions along each axis; a partial trailing window is dropped.
    pub fn output_dims(kernel: (usize, usize), stride: (usize, usize), h: usize, w: usize) -> (usize, usize) {
        ((h - kernel.0) / stride.0 + 1, (w - kernel.1) / stride.1 + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramLayer<T = f32> {
    /// B×D bin centres.
    pub centers: Tensor<T>,
    /// B×D bin widths; only γ² enters the votes, so the sign is irrelevant.
    pub widths: Tensor<T>,
    pub window: HistWindow,
}

impl<T: Real> HistogramLayer<T> {
    /// Centres evenly spaced on [0, 1] at `(b + 0.5)/B`, widths all `B`.
    ///
    /// Neighbouring bins then cross at a vote of `exp(-1/4)`.
    pub fn init(bins: usize, channels: usize, window: HistWindow) -> Result<Self> {
        if bins == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "histogram needs at least one bin and channel, got B={} D={}",
                bins, channels
            )));
        }
        let mut centers = Vec::with_capacity(bins * channels);
        for b in 0..bins {
            let mu = (b as f64 + 0.5) / bins as f64;
            centers.extend(std::iter::repeat_n(T::of(mu), channels));
        }
        Ok(HistogramLayer {
            centers: Tensor::new(vec![bins, channels], centers)?,
            widths: Tensor::full(&[bins, channels], T::of(bins as f64)),
            window,
        })
    }

    pub fn bins(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.centers.shape()[1]
    }

    /// Direct evaluation on an N×D×H×W tensor, outside of any recording.
    pub fn forward_direct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let c = tape.leaf(self.centers.clone(), false);
        let w = tape.leaf(self.widths.clone(), false);
        let y = tape.histogram(xv, c, w, self.window)?;
        Ok(tape.value(y).clone())
    }

    /// Factored evaluation on an N×D×H×W tensor, outside of any recording.
    pub fn forward_factored(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let c = tape.leaf(self.centers.clone(), false);
        let w = tape.leaf(self.widths.clone(), false);
        let y = tape.histogram_factored(xv, c, w, self.window)?;
        Ok(tape.value(y).clone())
    }
}

fn check_shapes(x: &[usize], centers: &[usize], widths: &[usize]) -> Result<()> {
    if x.len() != 4 || centers.len() != 2 || centers != widths || centers[1] != x[1] {
        return Err(Error::shape(
            "histogram",
            format!("input {:?}, centers {:?}, widths {:?}", x, centers, widths),
        ));
    }
    Ok(())
}

pub(crate) struct HistGrads<T> {
    pub input: Vec<T>,
    pub centers: Vec<T>,
    pub widths: Vec<T>,
}

pub(crate) fn direct_backward<T: Real>(
    x: &Tensor<T>,
    centers: &Tensor<T>,
    widths: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    gout: &[T],
) -> HistGrads<T> {
    let s = x.shape();
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    let bins = centers.shape()[0];
    let (r, c) = HistWindow::output_dims(kernel, stride, h, w);
    let scale = 1.0 / (kernel.0 * kernel.1) as f64;
    let mut gx = vec![0f64; x.len()];
    let mut gmu = vec![0f64; bins * d];
    let mut ggamma = vec![0f64; bins * d];
    // Upstream gradient spread back onto input positions, per (sample, bin, channel).
    let mut spread = vec![0f64; h * w];
    for sample in 0..n {
        for b in 0..bins {
            for ch in 0..d {
                let k = b * d + ch;
                let mu = centers.data()[k].f64();
                let gamma = widths.data()[k].f64();
                let g2 = gamma * gamma;
                spread.fill(0.0);
                let go = &gout[((sample * bins + b) * d + ch) * r * c..][..r * c];
                for i in 0..r {
                    for j in 0..c {
                        let v = go[i * c + j].f64() * scale;
                        for a in 0..kernel.0 {
                            let row = &mut spread[(i * stride.0 + a) * w + j * stride.1..][..kernel.1];
                            row.iter_mut().for_each(|e| *e += v);
                        }
                    }
                }
                let plane = &x.data()[(sample * d + ch) * h * w..][..h * w];
                let gplane = &mut gx[(sample * d + ch) * h * w..][..h * w];
                let (mut sum_mu, mut sum_gamma) = (0f64, 0f64);
                for ((xv, a), gxv) in plane.iter().zip(&spread).zip(gplane.iter_mut()) {
                    if *a == 0.0 {
                        continue;
                    }
                    let u = xv.f64() - mu;
                    let vote = (-g2 * u * u).exp();
                    let common = a * vote;
                    *gxv -= common * 2.0 * g2 * u;
                    sum_mu += common * 2.0 * g2 * u;
                    sum_gamma -= common * 2.0 * gamma * u * u;
                }
                gmu[k] += sum_mu;
                ggamma[k] += sum_gamma;
            }
        }
    }
    HistGrads {
        input: gx.into_iter().map(T::of).collect(),
        centers: gmu.into_iter().map(T::of).collect(),
        widths: ggamma.into_iter().map(T::of).collect(),
    }
}

impl<T: Real> Tape<T> {
    /// Direct soft-binning of an N×D×H×W input against B×D `centers`/`widths`.
    ///
    /// Returns N×(B·D)×R×C votes, each in [0, 1].
    pub fn histogram(&mut self, input: Var, centers: Var, widths: Var, window: HistWindow) -> Result<Var> {
        let s = self.shape(input).to_vec();
        check_shapes(&s, self.shape(centers), self.shape(widths))?;
        let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
        let (kernel, stride) = window.resolve(h, w)?;
        let (r, c) = HistWindow::output_dims(kernel, stride, h, w);
        let bins = self.shape(centers)[0];
        let scale = 1.0 / (kernel.0 * kernel.1) as f64;
        let x = self.value(input).data();
        let mu = self.value(centers).data();
        let gamma = self.value(widths).data();
        let mut out = Vec::with_capacity(n * bins * d * r * c);
        let mut votes = vec![0f64; h * w];
        for sample in 0..n {
            for b in 0..bins {
                for ch in 0..d {
                    let m = mu[b * d + ch].f64();
                    let g2 = gamma[b * d + ch].f64().powi(2);
                    let plane = &x[(sample * d + ch) * h * w..][..h * w];
                    for (v, xv) in votes.iter_mut().zip(plane) {
                        let u = xv.f64() - m;
                        *v = (-g2 * u * u).exp();
                    }
                    for i in 0..r {
                        for j in 0..c {
                            let mut acc = 0f64;
                            for a in 0..kernel.0 {
                                acc += votes[(i * stride.0 + a) * w + j * stride.1..][..kernel.1]
                                    .iter()
                                    .sum::<f64>();
                            }
                            out.push(T::of(acc * scale));
                        }
                    }
                }
            }
        }
        self.push(
            "histogram",
            Tensor::new(vec![n, bins * d, r, c], out)?,
            &[input, centers, widths],
            Op::Histogram {
                input,
                centers,
                widths,
                window: kernel,
                stride,
            },
        )
    }

    /// The same votes as [`Tape::histogram`], built from generic operators.
    pub fn histogram_factored(
        &mut self,
        input: Var,
        centers: Var,
        widths: Var,
        window: HistWindow,
    ) -> Result<Var> {
        let s = self.shape(input).to_vec();
        check_shapes(&s, self.shape(centers), self.shape(widths))?;
        let (kernel, stride) = window.resolve(s[2], s[3])?;
        let bd = self.value(centers).len();
        let center_shape = self.shape(centers).to_vec();
        let unit = self.leaf(Tensor::full(&center_shape, T::one()), false);
        let neg_centers = self.neg(centers)?;
        let shifted = self.bin_affine(input, unit, Some(neg_centers))?;
        let width_row = self.reshape(widths, &[1, bd])?;
        let scaled = self.bin_affine(shifted, width_row, None)?;
        let sq = self.square(scaled)?;
        let neg = self.neg(sq)?;
        let rbf = self.exp(neg)?;
        self.avgpool(rbf, kernel, stride)
    }
}
