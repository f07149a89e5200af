//! Same-padded 2-D/1-D convolution (cross-correlation) and affine maps.

use super::ParamGrads;
use crate::autodiff::tape::{Op, Tape, Var};
use crate::autodiff::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn from_shapes(input: &[usize], weight: &[usize]) -> Self {
        if input.len() == 4 {
            ConvGeom {
                batch: input[0],
                c_in: input[1],
                c_out: weight[0],
                h: input[2],
                w: input[3],
                kh: weight[2],
                kw: weight[3],
            }
        } else {
            ConvGeom {
                batch: input[0],
                c_in: input[1],
                c_out: weight[0],
                h: 1,
                w: input[2],
                kh: 1,
                kw: weight[2],
            }
        }
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.plane();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for i in 0..g.h {
                    let si = i as isize + ki as isize - ph as isize;
                    let line = &mut dst[i * g.w..(i + 1) * g.w];
                    if si < 0 || si >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + si as usize) * g.w..][..g.w];
                    for (j, d) in line.iter_mut().enumerate() {
                        let sj = j as isize + kj as isize - pw as isize;
                        *d = if sj < 0 || sj >= g.w as isize {
                            T::zero()
                        } else {
                            src[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.plane();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for i in 0..g.h {
                    let si = i as isize + ki as isize - ph as isize;
                    if si < 0 || si >= g.h as isize {
                        continue;
                    }
                    let dst = &mut gx[(c * g.h + si as usize) * g.w..][..g.w];
                    for j in 0..g.w {
                        let sj = j as isize + kj as isize - pw as isize;
                        if sj >= 0 && sj < g.w as isize {
                            dst[sj as usize] = dst[sj as usize] + src[i * g.w + j];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Vec<T> {
    let g = ConvGeom::from_shapes(x.shape(), w.shape());
    let (k, plane) = (g.patch(), g.plane());
    let mut out = vec![T::zero(); g.batch * g.c_out * plane];
    let mut cols = vec![T::zero(); k * plane];
    for n in 0..g.batch {
        let xn = &x.data()[n * g.c_in * plane..(n + 1) * g.c_in * plane];
        im2col(xn, &g, &mut cols);
        let on = &mut out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        if let Some(b) = b {
            for (o, row) in on.chunks_mut(plane).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        T::gemm(
            g.c_out,
            k,
            plane,
            T::one(),
            w.data(),
            (k as isize, 1),
            &cols,
            (plane as isize, 1),
            T::one(),
            on,
            (plane as isize, 1),
        );
    }
    out
}

pub(crate) fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &[T],
    need_input: bool,
) -> ParamGrads<T> {
    let g = ConvGeom::from_shapes(x.shape(), w.shape());
    let (k, plane) = (g.patch(), g.plane());
    let mut gw = vec![T::zero(); g.c_out * k];
    let mut gb = vec![0f64; g.c_out];
    let mut gx = need_input.then(|| vec![T::zero(); x.len()]);
    let mut cols = vec![T::zero(); k * plane];
    let mut gcols = vec![T::zero(); k * plane];
    for n in 0..g.batch {
        let xn = &x.data()[n * g.c_in * plane..(n + 1) * g.c_in * plane];
        let gn = &gout[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        im2col(xn, &g, &mut cols);
        T::gemm(
            g.c_out,
            plane,
            k,
            T::one(),
            gn,
            (plane as isize, 1),
            &cols,
            (1, plane as isize),
            T::one(),
            &mut gw,
            (k as isize, 1),
        );
        for (o, row) in gn.chunks(plane).enumerate() {
            gb[o] += row.iter().map(|v| v.f64()).sum::<f64>();
        }
        if let Some(gx) = gx.as_mut() {
            T::gemm(
                k,
                g.c_out,
                plane,
                T::one(),
                w.data(),
                (1, k as isize),
                gn,
                (plane as isize, 1),
                T::zero(),
                &mut gcols,
                (plane as isize, 1),
            );
            col2im(
                &gcols,
                &g,
                &mut gx[n * g.c_in * plane..(n + 1) * g.c_in * plane],
            );
        }
    }
    ParamGrads {
        input: gx,
        weight: gw,
        bias: gb.into_iter().map(T::of).collect(),
    }
}

pub(crate) fn linear_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, gout: &[T]) -> ParamGrads<T> {
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = w.shape()[0];
    let mut gx = vec![T::zero(); n * d_in];
    T::gemm(
        n,
        d_out,
        d_in,
        T::one(),
        gout,
        (d_out as isize, 1),
        w.data(),
        (d_in as isize, 1),
        T::zero(),
        &mut gx,
        (d_in as isize, 1),
    );
    let mut gw = vec![T::zero(); d_out * d_in];
    T::gemm(
        d_out,
        n,
        d_in,
        T::one(),
        gout,
        (1, d_out as isize),
        x.data(),
        (d_in as isize, 1),
        T::zero(),
        &mut gw,
        (d_in as isize, 1),
    );
    let gb = (0..d_out)
        .map(|o| T::of((0..n).map(|i| gout[i * d_out + o].f64()).sum()))
        .collect();
    ParamGrads {
        input: Some(gx),
        weight: gw,
        bias: gb,
    }
}

fn check_bias<T: Real>(tape: &Tape<T>, op: &'static str, bias: Option<Var>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if tape.shape(b) != [c_out] {
            return Err(Error::shape(
                op,
                format!("bias {:?} for {} outputs", tape.shape(b), c_out),
            ));
        }
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    /// Stride-1 cross-correlation with "same" zero padding.
    ///
    /// `input` is N×C_in×H×W, `weight` is C_out×C_in×kH×kW with odd kernel sides.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", format!("input {:?}, weight {:?}", xs, ws)));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {:?} must be odd-sized", &ws[2..])));
        }
        let shape = vec![xs[0], ws[0], xs[2], xs[3]];
        check_bias(self, "conv2d", bias, ws[0])?;
        let out = conv_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)));
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            Tensor::new(shape, out)?,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
        )
    }

    /// One-axis counterpart of [`Tape::conv2d`]: N×C_in×T with a C_out×C_in×k kernel.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(Error::shape("conv1d", format!("input {:?}, weight {:?}", xs, ws)));
        }
        if ws[2] % 2 == 0 {
            return Err(Error::shape("conv1d", format!("kernel {} must be odd", ws[2])));
        }
        let shape = vec![xs[0], ws[0], xs[2]];
        check_bias(self, "conv1d", bias, ws[0])?;
        let out = conv_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)));
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv1d",
            Tensor::new(shape, out)?,
            &inputs,
            Op::Conv1d {
                input,
                weight,
                bias,
            },
        )
    }

    /// `x · Wᵀ + b` with `x` N×In and `W` Out×In.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {:?}, weight {:?}", xs, ws)));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        check_bias(self, "linear", bias, d_out)?;
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = bias {
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        T::gemm(
            n,
            d_in,
            d_out,
            T::one(),
            self.value(input).data(),
            (d_in as isize, 1),
            self.value(weight).data(),
            (1, d_in as isize),
            T::one(),
            &mut out,
            (d_out as isize, 1),
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "linear",
            Tensor::new(vec![n, d_out], out)?,
            &inputs,
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }
}
