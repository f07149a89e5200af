//! Baseline TDNN and histogram-layer TDNN assembled from tape operators.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::histogram::{HistWindow, HistogramLayer, CENTERS_PARAM, WIDTHS_PARAM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tdnn,
    Hltdnn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Tdnn => "tdnn",
            ModelKind::Hltdnn => "hltdnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tdnn" => Ok(ModelKind::Tdnn),
            "hltdnn" => Ok(ModelKind::Hltdnn),
            _ => Err(Error::invalid(format!("unknown model '{}' (expected tdnn or hltdnn)", s))),
        }
    }
}

/// How the histogram branch is evaluated; both give the same values and gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistRoute {
    #[default]
    Direct,
    Factored,
}

pub const NUM_BLOCKS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub block_channels: [usize; NUM_BLOCKS],
    pub conv_kernel: [usize; 2],
    pub pool_len: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub bins: usize,
    pub dropout: f64,
    pub hist_window: HistWindow,
    pub hist_route: HistRoute,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            block_channels: [16, 32, 64, 128],
            conv_kernel: [3, 3],
            pool_len: 2,
            embed_dim: 128,
            num_classes: 4,
            bins: 16,
            dropout: 0.5,
            hist_window: HistWindow::Global,
            hist_route: HistRoute::Direct,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("model config: {}", m)));
        if self.block_channels.contains(&0) || self.embed_dim == 0 || self.bins == 0 {
            return bad("channel widths, embed_dim and bins must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.conv_kernel.iter().any(|k| k % 2 == 0) {
            return bad(format!("conv_kernel {:?} must have odd sides", self.conv_kernel));
        }
        if self.pool_len == 0 {
            return bad("pool_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Time frames left after the four pooling stages.
    pub fn pooled_time(&self, time: usize) -> usize {
        (0..NUM_BLOCKS).fold(time, |t, _| t / self.pool_len)
    }
}

pub fn block_weight(i: usize) -> String {
    format!("block{}.conv.weight", i)
}

pub fn block_bias(i: usize) -> String {
    format!("block{}.conv.bias", i)
}

pub const HEAD_WEIGHT: &str = "head.conv1d.weight";
pub const HEAD_BIAS: &str = "head.conv1d.bias";
pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub kind: ModelKind,
    pub config: ModelConfig,
    /// `(F, T)` of the expected feature maps.
    pub input_shape: (usize, usize),
    pub params: ParamStore<T>,
}

/// Variables produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Penultimate features, before dropout.
    pub embedding: Var,
    /// Block-4 activations, N×C×F×T'.
    pub block4: Var,
    /// Flattened histogram descriptor (HLTDNN only).
    pub histogram: Option<Var>,
}

fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<f32>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    Tensor::new(shape.to_vec(), data)
}

impl Model<f32> {
    /// Kaiming-uniform weights (fan-in), zero biases, histogram bins spread over [0, 1].
    pub fn build<R: Rng + ?Sized>(
        kind: ModelKind,
        config: &ModelConfig,
        input_shape: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (freq, time) = input_shape;
        if freq == 0 || config.pooled_time(time) == 0 {
            return Err(Error::invalid(format!(
                "input {}x{} leaves no time frames after {} pools of {}",
                freq, time, NUM_BLOCKS, config.pool_len
            )));
        }
        let [kh, kw] = config.conv_kernel;
        let mut params = ParamStore::new();
        let mut c_in = 1;
        for (i, &c_out) in config.block_channels.iter().enumerate() {
            params.insert(block_weight(i + 1), kaiming(&[c_out, c_in, kh, kw], c_in * kh * kw, rng)?)?;
            params.insert(block_bias(i + 1), Tensor::zeros(&[c_out]))?;
            c_in = c_out;
        }
        let flat = c_in * freq;
        params.insert(HEAD_WEIGHT, kaiming(&[config.embed_dim, flat, 1], flat, rng)?)?;
        params.insert(HEAD_BIAS, Tensor::zeros(&[config.embed_dim]))?;
        let mut features = config.embed_dim;
        if kind == ModelKind::Hltdnn {
            let hist = HistogramLayer::<f32>::init(config.bins, c_in, config.hist_window)?;
            let pooled = (freq, config.pooled_time(time));
            let (kernel, stride) = config.hist_window.resolve(pooled.0, pooled.1)?;
            let (r, c) = HistWindow::output_dims(kernel, stride, pooled.0, pooled.1);
            features += config.bins * c_in * r * c;
            params.insert(CENTERS_PARAM, hist.centers)?;
            params.insert(WIDTHS_PARAM, hist.widths)?;
        }
        params.insert(
            CLASSIFIER_WEIGHT,
            kaiming(&[config.num_classes, features], features, rng)?,
        )?;
        params.insert(CLASSIFIER_BIAS, Tensor::zeros(&[config.num_classes]))?;
        Ok(Model {
            kind,
            config: config.clone(),
            input_shape,
            params,
        })
    }
}

impl<T: Real> Model<T> {
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            kind: self.kind,
            config: self.config.clone(),
            input_shape: self.input_shape,
            params: self.params.cast(),
        }
    }

    /// Width of the penultimate feature vector.
    pub fn embed_dim(&self) -> usize {
        self.params
            .get(CLASSIFIER_WEIGHT)
            .map_or(0, |w| w.shape()[1])
    }

    /// Checks that a parameter store matches this architecture's names and shapes.
    pub fn check_params(&self, other: &ParamStore<T>) -> Result<()> {
        let mine: Vec<(&str, &[usize])> = self.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let theirs: Vec<(&str, &[usize])> = other.iter().map(|(n, t)| (n, t.shape())).collect();
        if mine != theirs {
            return Err(Error::invalid(format!(
                "parameters do not match the {} architecture: expected {:?}, found {:?}",
                self.kind, mine, theirs
            )));
        }
        Ok(())
    }

    /// Records a forward pass. `vars` are this model's parameters as returned by
    /// [`ParamStore::register`]; `input` is N×1×F×T.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        input: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let s = tape.shape(input).to_vec();
        if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != self.input_shape {
            return Err(Error::shape(
                "model input",
                format!("expected N×1×{}×{}, got {:?}", self.input_shape.0, self.input_shape.1, s),
            ));
        }
        let p = |name: &str| -> Result<Var> {
            self.params
                .index_of(name)
                .and_then(|i| vars.get(i).copied())
                .ok_or_else(|| Error::invalid(format!("missing parameter {}", name)))
        };
        let mut x = input;
        for i in 1..=NUM_BLOCKS {
            x = tape.conv2d(x, p(&block_weight(i))?, Some(p(&block_bias(i))?))?;
            x = tape.relu(x)?;
            x = tape.maxpool_time(x, self.config.pool_len)?;
        }
        let block4 = x;
        let flat = tape.flatten_channels(block4)?;
        let head = tape.conv1d(flat, p(HEAD_WEIGHT)?, Some(p(HEAD_BIAS)?))?;
        let head = tape.sigmoid(head)?;
        let mut embedding = tape.global_avg_pool(head)?;
        let mut histogram = None;
        if self.kind == ModelKind::Hltdnn {
            let (c, w) = (p(CENTERS_PARAM)?, p(WIDTHS_PARAM)?);
            let h = match self.config.hist_route {
                HistRoute::Direct => tape.histogram(block4, c, w, self.config.hist_window)?,
                HistRoute::Factored => tape.histogram_factored(block4, c, w, self.config.hist_window)?,
            };
            let hs = tape.shape(h).to_vec();
            let h = tape.reshape(h, &[hs[0], hs[1..].iter().product()])?;
            histogram = Some(h);
            embedding = tape.concat(&[embedding, h])?;
        }
        let dropped = tape.dropout(embedding, self.config.dropout, training, rng)?;
        let logits = tape.linear(dropped, p(CLASSIFIER_WEIGHT)?, Some(p(CLASSIFIER_BIAS)?))?;
        Ok(Forward {
            logits,
            embedding,
            block4,
            histogram,
        })
    }

    /// Eval-mode pass (dropout is the identity, so the generator is never drawn) without gradients, returning `(logits, embedding)`.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let input = tape.leaf(batch.clone(), false);
        let out = self.forward(&mut tape, &vars, input, false, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        Ok((tape.value(out.logits).clone(), tape.value(out.embedding).clone()))
    }

    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer(batch)?.0)
    }

    /// Penultimate features, N×E (TDNN) or N×(E + B·D) (HLTDNN).
    pub fn embed(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer(batch)?.1)
    }
}
