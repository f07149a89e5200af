#![allow(dead_code)]

use histnet::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero (kinks) and pairwise at least `gap` apart.
pub fn spaced_tensor(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap)
        .collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Scalar `Σ w ⊙ out` with fixed random weights, so every output entry matters.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> Result<Var> {
    let n = tape.value(out).len();
    let flat = tape.reshape(out, &[1, n])?;
    let w = tape.leaf(Tensor::new(vec![1, n], weights.to_vec())?, false);
    tape.linear(flat, w, None)
}

pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
}

/// Compares analytic gradients of every input against central differences.
///
/// An entry passes when `|analytic - numeric| <= rel * max(|analytic|, |numeric|) + abs`;
/// `worst` is the largest ratio of error to that allowance.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, rel: f64, abs: f64, seed: u64, build: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let mut r = rng(seed);
    let weights: Vec<f64> = (0..tape.value(out).len())
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let loss = weighted_sum(&mut tape, out, &weights).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or(vec![0.0; t.len()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars).unwrap();
        let loss = weighted_sum(&mut tape, out, &weights).unwrap();
        tape.value(loss).data()[0]
    };

    let mut report = GradReport { checked: 0, worst: 0.0 };
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[k][i];
            let allowance = rel * a.abs().max(numeric.abs()) + abs;
            report.worst = report.worst.max((a - numeric).abs() / allowance);
            report.checked += 1;
        }
    }
    report
}

/// Quadruple-loop same-padded cross-correlation.
pub fn conv2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let mut out = vec![0.0; n * cout * h * wd];
    for s in 0..n {
        for o in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for a in 0..kh {
                            for e in 0..kw {
                                let si = i as isize + a as isize - (kh / 2) as isize;
                                let sj = j as isize + e as isize - (kw / 2) as isize;
                                if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((s * cin + c) * h + si as usize) * wd + sj as usize]
                                    * w.data()[((o * cin + c) * kh + a) * kw + e];
                            }
                        }
                    }
                    out[((s * cout + o) * h + i) * wd + j] = acc;
                }
            }
        }
    }
    out
}

/// Eq.-style literal evaluation of the soft-binning votes.
pub fn histogram_oracle(
    x: &Tensor<f64>,
    centers: &Tensor<f64>,
    widths: &Tensor<f64>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Tensor<f64> {
    let (n, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let bins = centers.shape()[0];
    let r = (h - kernel.0) / stride.0 + 1;
    let c = (w - kernel.1) / stride.1 + 1;
    let mut out = Vec::new();
    for s in 0..n {
        for b in 0..bins {
            for ch in 0..d {
                let mu = centers.data()[b * d + ch];
                let g = widths.data()[b * d + ch];
                for i in 0..r {
                    for j in 0..c {
                        let mut acc = 0.0;
                        for a in 0..kernel.0 {
                            for e in 0..kernel.1 {
                                let v = x.data()[((s * d + ch) * h + i * stride.0 + a) * w + j * stride.1 + e];
                                acc += (-(g * g) * (v - mu).powi(2)).exp();
                            }
                        }
                        out.push(acc / (kernel.0 * kernel.1) as f64);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, bins * d, r, c], out).unwrap()
}
