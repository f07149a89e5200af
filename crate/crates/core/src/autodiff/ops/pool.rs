//! Max pooling along time, windowed and global average pooling.

use crate::autodiff::tape::{Op, Tape, Var};
use crate::autodiff::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub(crate) fn maxpool_backward<T: Real>(len: usize, argmax: &[usize], g: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); len];
    for (idx, gv) in argmax.iter().zip(g) {
        gx[*idx] = gx[*idx] + *gv;
    }
    gx
}

pub(crate) fn avgpool_backward<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    g: &[T],
) -> Vec<T> {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (r, c) = (y.shape()[2], y.shape()[3]);
    let scale = 1.0 / (kh * kw) as f64;
    let mut gx = vec![T::zero(); x.len()];
    for p in 0..planes {
        let gxp = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..r {
            for j in 0..c {
                let share = T::of(g[(p * r + i) * c + j].f64() * scale);
                for a in 0..kh {
                    let row = &mut gxp[(i * sh + a) * w + j * sw..][..kw];
                    row.iter_mut().for_each(|v| *v = *v + share);
                }
            }
        }
    }
    gx
}

pub(crate) fn global_avg_pool_backward<T: Real>(x: &Tensor<T>, g: &[T]) -> Vec<T> {
    let inner: usize = x.shape()[2..].iter().product();
    let scale = 1.0 / inner as f64;
    let mut gx = Vec::with_capacity(x.len());
    for gv in g {
        let share = T::of(gv.f64() * scale);
        gx.extend(std::iter::repeat_n(share, inner));
    }
    gx
}

impl<T: Real> Tape<T> {
    /// Non-overlapping max over windows of `len` along the last axis.
    ///
    /// A trailing remainder shorter than `len` is discarded. Ties route the
    /// gradient to the lowest index.
    pub fn maxpool_time(&mut self, x: Var, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().ok_or_else(|| Error::shape("maxpool_time", "scalar input"))?;
        if len == 0 || w < len {
            return Err(Error::shape(
                "maxpool_time",
                format!("pool length {} over time axis {}", len, w),
            ));
        }
        let out_w = w / len;
        let rows = self.value(x).len() / w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * out_w);
        let mut argmax = Vec::with_capacity(rows * out_w);
        for r in 0..rows {
            for j in 0..out_w {
                let start = r * w + j * len;
                let mut best = start;
                for k in start + 1..start + len {
                    if src[k] > src[best] {
                        best = k;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let mut shape = s;
        *shape.last_mut().expect("rank >= 1") = out_w;
        self.push(
            "maxpool_time",
            Tensor::new(shape, out)?,
            &[x],
            Op::MaxPoolTime { input: x, argmax },
        )
    }

    /// Mean over `kernel` windows of an N×C×H×W input, stepping by `stride`.
    pub fn avgpool(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4
            || kernel.0 == 0
            || kernel.1 == 0
            || stride.0 == 0
            || stride.1 == 0
            || kernel.0 > s[2]
            || kernel.1 > s[3]
        {
            return Err(Error::shape(
                "avgpool",
                format!("kernel {:?} stride {:?} on {:?}", kernel, stride, s),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let r = (h - kernel.0) / stride.0 + 1;
        let c = (w - kernel.1) / stride.1 + 1;
        let scale = 1.0 / (kernel.0 * kernel.1) as f64;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * r * c);
        for p in 0..s[0] * s[1] {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for i in 0..r {
                for j in 0..c {
                    let mut acc = 0f64;
                    for a in 0..kernel.0 {
                        let row = &plane[(i * stride.0 + a) * w + j * stride.1..][..kernel.1];
                        acc += row.iter().map(|v| v.f64()).sum::<f64>();
                    }
                    out.push(T::of(acc * scale));
                }
            }
        }
        self.push(
            "avgpool",
            Tensor::new(vec![s[0], s[1], r, c], out)?,
            &[x],
            Op::AvgPool {
                input: x,
                kernel,
                stride,
            },
        )
    }

    /// Per-channel mean over all axes after 1, giving N×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape("global_avg_pool", format!("{:?}", s)));
        }
        let inner: usize = s[2..].iter().product();
        let out = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| T::of(c.iter().map(|v| v.f64()).sum::<f64>() / inner as f64))
            .collect();
        self.push(
            "global_avg_pool",
            Tensor::new(vec![s[0], s[1]], out)?,
            &[x],
            Op::GlobalAvgPool(x),
        )
    }
}
