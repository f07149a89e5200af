use super::ops::{conv, elementwise, loss, pool};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::histogram;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Scale(Var, T),
    SubBroadcast {
        input: Var,
        offsets: Var,
    },
    BinAffine {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    MaxPoolTime {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    GlobalAvgPool(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Histogram {
        input: Var,
        centers: Var,
        widths: Var,
        window: (usize, usize),
        stride: (usize, usize),
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Define-by-run recording of a computation.
///
/// Nodes are appended in evaluation order, so the recording order is a
/// topological order and `backward` simply walks it in reverse.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        op: Op<T>,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss`, summing gradients over fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let contributions = self.input_grads(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, grad: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut result = Vec::new();
        let mut emit = |v: Var, g: Vec<T>| result.push((v, g));
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
            }
            | Op::Conv1d {
                input,
                weight,
                bias,
            } => {
                let g = conv::conv_backward(
                    self.value(*input),
                    self.value(*weight),
                    grad,
                    self.needs(*input),
                );
                if let Some(gx) = g.input {
                    emit(*input, gx);
                }
                if self.needs(*weight) {
                    emit(*weight, g.weight);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        emit(*b, g.bias);
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let g = conv::linear_backward(self.value(*input), self.value(*weight), grad);
                if self.needs(*input) {
                    emit(*input, g.input.unwrap_or_default());
                }
                if self.needs(*weight) {
                    emit(*weight, g.weight);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        emit(*b, g.bias);
                    }
                }
            }
            Op::Relu(x) => emit(*x, elementwise::relu_backward(self.value(*x), grad)),
            Op::Sigmoid(x) => emit(*x, elementwise::sigmoid_backward(out, grad)),
            Op::Exp(x) => emit(*x, elementwise::mul(out.data(), grad)),
            Op::Square(x) => emit(*x, elementwise::square_backward(self.value(*x), grad)),
            Op::Scale(x, c) => emit(*x, grad.iter().map(|g| *g * *c).collect()),
            Op::SubBroadcast { input, offsets } => {
                if self.needs(*input) {
                    emit(*input, grad.to_vec());
                }
                if self.needs(*offsets) {
                    emit(
                        *offsets,
                        elementwise::sub_broadcast_offsets_grad(self.value(*input), grad),
                    );
                }
            }
            Op::BinAffine {
                input,
                weight,
                bias,
            } => {
                let g = elementwise::bin_affine_backward(
                    self.value(*input),
                    self.value(*weight),
                    grad,
                );
                if self.needs(*input) {
                    emit(*input, g.input.unwrap_or_default());
                }
                if self.needs(*weight) {
                    emit(*weight, g.weight);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        emit(*b, g.bias);
                    }
                }
            }
            Op::Concat(inputs) => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
                for (v, g) in inputs.iter().zip(elementwise::concat_backward(&shapes, grad)) {
                    if self.needs(*v) {
                        emit(*v, g);
                    }
                }
            }
            Op::Reshape(x) => emit(*x, grad.to_vec()),
            Op::MaxPoolTime { input, argmax } => {
                emit(
                    *input,
                    pool::maxpool_backward(self.value(*input).len(), argmax, grad),
                );
            }
            Op::AvgPool {
                input,
                kernel,
                stride,
            } => emit(
                *input,
                pool::avgpool_backward(self.value(*input), out, *kernel, *stride, grad),
            ),
            Op::GlobalAvgPool(x) => emit(*x, pool::global_avg_pool_backward(self.value(*x), grad)),
            Op::Dropout { input, mask } => emit(*input, elementwise::mul(mask, grad)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => emit(*logits, loss::softmax_cross_entropy_backward(probs, labels, grad)),
            Op::Histogram {
                input,
                centers,
                widths,
                window,
                stride,
            } => {
                let g = histogram::direct_backward(
                    self.value(*input),
                    self.value(*centers),
                    self.value(*widths),
                    *window,
                    *stride,
                    grad,
                );
                if self.needs(*input) {
                    emit(*input, g.input);
                }
                if self.needs(*centers) {
                    emit(*centers, g.centers);
                }
                if self.needs(*widths) {
                    emit(*widths, g.widths);
                }
            }
        }
        result
    }
}
