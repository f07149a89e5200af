//! Pointwise maps, broadcasting, and shape manipulation.

use rand::Rng;

use super::ParamGrads;
use crate::autodiff::tape::{Op, Tape, Var};
use crate::autodiff::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub(crate) fn mul<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x * *y).collect()
}

pub(crate) fn relu_backward<T: Real>(x: &Tensor<T>, g: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(g)
        .map(|(x, g)| if *x > T::zero() { *g } else { T::zero() })
        .collect()
}

pub(crate) fn sigmoid_backward<T: Real>(y: &Tensor<T>, g: &[T]) -> Vec<T> {
    y.data()
        .iter()
        .zip(g)
        .map(|(y, g)| *g * *y * (T::one() - *y))
        .collect()
}

pub(crate) fn square_backward<T: Real>(x: &Tensor<T>, g: &[T]) -> Vec<T> {
    let two = T::of(2.0);
    x.data().iter().zip(g).map(|(x, g)| two * *x * *g).collect()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sum of `grad` over every axis except 1.
pub(crate) fn sub_broadcast_offsets_grad<T: Real>(x: &Tensor<T>, g: &[T]) -> Vec<T> {
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let mut acc = vec![0f64; c];
    for (i, v) in g.iter().enumerate() {
        acc[(i / inner) % c] -= v.f64();
    }
    acc.into_iter().map(T::of).collect()
}

pub(crate) fn bin_affine_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &[T]) -> ParamGrads<T> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let bins = w.shape()[0];
    let inner: usize = x.shape()[2..].iter().product();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![0f64; bins * d];
    let mut gb = vec![0f64; bins * d];
    for s in 0..n {
        for b in 0..bins {
            for c in 0..d {
                let wv = w.data()[b * d + c];
                let go = &g[((s * bins + b) * d + c) * inner..][..inner];
                let xi = &x.data()[(s * d + c) * inner..][..inner];
                let gxi = &mut gx[(s * d + c) * inner..][..inner];
                let (mut sw, mut sb) = (0f64, 0f64);
                for k in 0..inner {
                    gxi[k] = gxi[k] + go[k] * wv;
                    sw += (go[k] * xi[k]).f64();
                    sb += go[k].f64();
                }
                gw[b * d + c] += sw;
                gb[b * d + c] += sb;
            }
        }
    }
    ParamGrads {
        input: Some(gx),
        weight: gw.into_iter().map(T::of).collect(),
        bias: gb.into_iter().map(T::of).collect(),
    }
}

pub(crate) fn concat_backward<T: Real>(shapes: &[&[usize]], g: &[T]) -> Vec<Vec<T>> {
    let outer = shapes[0][0];
    let inner: usize = shapes[0][2..].iter().product();
    let total: usize = shapes.iter().map(|s| s[1]).sum();
    let mut offset = 0;
    let mut grads = Vec::with_capacity(shapes.len());
    for s in shapes {
        let mut part = Vec::with_capacity(outer * s[1] * inner);
        for o in 0..outer {
            let base = (o * total + offset) * inner;
            part.extend_from_slice(&g[base..base + s[1] * inner]);
        }
        offset += s[1];
        grads.push(part);
    }
    grads
}

impl<T: Real> Tape<T> {
    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(name, value, &[x], op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map("square", x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.map("scale", x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    /// `x[:, c, ...] - offsets[c]` for an N×C×… input and a length-C vector.
    pub fn sub_broadcast(&mut self, input: Var, offsets: Var) -> Result<Var> {
        let xs = self.shape(input);
        if xs.len() < 2 || self.shape(offsets) != [xs[1]] {
            return Err(Error::shape(
                "sub_broadcast",
                format!("{:?} - {:?}", xs, self.shape(offsets)),
            ));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let off = self.value(offsets).data();
        let src = self.value(input);
        let data = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v - off[(i / inner) % c])
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(
            "sub_broadcast",
            value,
            &[input, offsets],
            Op::SubBroadcast { input, offsets },
        )
    }

    /// Grouped 1×1 convolution fanning each input channel out to `B` maps.
    ///
    /// For an N×D×… input and B×D `weight` (and optional B×D `bias`), output
    /// channel `b·D + d` holds `weight[b,d]·x[:, d] + bias[b,d]`.
    pub fn bin_affine(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() < 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::shape("bin_affine", format!("input {:?}, weight {:?}", xs, ws)));
        }
        if let Some(b) = bias {
            if self.shape(b) != ws.as_slice() {
                return Err(Error::shape(
                    "bin_affine",
                    format!("bias {:?} vs weight {:?}", self.shape(b), ws),
                ));
            }
        }
        let (n, d, bins) = (xs[0], xs[1], ws[0]);
        let inner: usize = xs[2..].iter().product();
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut out = Vec::with_capacity(n * bins * d * inner);
        for s in 0..n {
            for b in 0..bins {
                for c in 0..d {
                    let wv = w[b * d + c];
                    let off = bv.map_or(T::zero(), |bv| bv[b * d + c]);
                    out.extend(x[(s * d + c) * inner..][..inner].iter().map(|v| wv * *v + off));
                }
            }
        }
        let mut shape = xs.clone();
        shape[1] = bins * d;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "bin_affine",
            Tensor::new(shape, out)?,
            &inputs,
            Op::BinAffine {
                input,
                weight,
                bias,
            },
        )
    }

    /// Concatenation along axis 1 (channels).
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(Error::shape("concat", "no inputs")),
        };
        if first.len() < 2 {
            return Err(Error::shape("concat", format!("rank of {:?} < 2", first)));
        }
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, first)));
            }
        }
        let inner: usize = first[2..].iter().product();
        let total: usize = inputs.iter().map(|v| self.shape(*v)[1]).sum();
        let mut out = Vec::with_capacity(first[0] * total * inner);
        for o in 0..first[0] {
            for v in inputs {
                let c = self.shape(*v)[1];
                out.extend_from_slice(&self.value(*v).data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            inputs,
            Op::Concat(inputs.to_vec()),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    /// Merges axes 1 and 2: N×C×F×T becomes N×(C·F)×T.
    pub fn flatten_channels(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("flatten_channels", format!("{:?}", s)));
        }
        self.reshape(x, &[s[0], s[1] * s[2], s[3]])
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity outside training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {} not in [0,1)", p)));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), mul(src.data(), &mask))?;
        self.push("dropout", value, &[x], Op::Dropout { input: x, mask })
    }
}
