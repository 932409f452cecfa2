//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! so node inputs always precede the node. [`Tape::backward`] walks the tape
//! in reverse and returns gradients for every node reachable from the loss,
//! intermediates included.

use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{PcnError, Result};
use crate::ops::{self, norm, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Relu,
    ScaleChannels,
    Conv2d,
    ConvTranspose2d,
    BatchNormTrain,
    BatchNormEval,
    MaxPool2,
    GlobalAvgPool,
    Linear,
    SoftmaxCrossEntropy,
    Sum,
    HalfSumSquares,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Relu,
        OpKind::ScaleChannels,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::BatchNormTrain,
        OpKind::BatchNormEval,
        OpKind::MaxPool2,
        OpKind::GlobalAvgPool,
        OpKind::Linear,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Sum,
        OpKind::HalfSumSquares,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Relu => "relu",
            OpKind::ScaleChannels => "scale_channels",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::BatchNormTrain => "batchnorm_train",
            OpKind::BatchNormEval => "batchnorm_eval",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Linear => "linear",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Sum => "sum",
            OpKind::HalfSumSquares => "half_sum_squares",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Relu(Var),
    ScaleChannels { x: Var, scale: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeometry },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, cache: norm::BnCache<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Tensor<T>, inv_std: Vec<T> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    Sum(Var),
    HalfSumSquares(Var),
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Relu(_) => OpKind::Relu,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::BatchNormTrain { .. } => OpKind::BatchNormTrain,
            Op::BatchNormEval { .. } => OpKind::BatchNormEval,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::HalfSumSquares(_) => OpKind::HalfSumSquares,
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recorded forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
    branches: Option<DefaultHasher>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros (shaped like the value) when unreachable.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| tape.value(v).zeros_like())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
            branches: None,
        }
    }

    /// Scale every backward contribution of `kind` by 1.1. Negative control
    /// for gradient checks; never used in training.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Start fingerprinting the branch decisions taken by ReLU and max-pool.
    pub fn track_branches(&mut self) {
        self.branches = Some(DefaultHasher::new());
    }

    /// Fingerprint of every ReLU mask and pooling choice recorded so far.
    /// Two passes with equal signatures took the same piecewise-linear branch.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.as_ref().map(Hasher::finish)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = ops::relu(self.value(x));
        if let Some(h) = self.branches.as_mut() {
            for val in self.nodes[x.0].value.data() {
                (*val > T::zero()).hash(h);
            }
        }
        self.push(Op::Relu(x), v)
    }

    pub fn scale_channels(&mut self, x: Var, scale: Var) -> Result<Var> {
        let v = ops::scale_channels(self.value(x), self.value(scale))?;
        Ok(self.push(Op::ScaleChannels { x, scale }, v))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let v = ops::conv2d(self.value(x), self.value(w), geom)?;
        Ok(self.push(Op::Conv2d { x, w, geom }, v))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let v = ops::conv_transpose2d(self.value(x), self.value(w), geom)?;
        Ok(self.push(Op::ConvTranspose2d { x, w, geom }, v))
    }

    /// Batch norm with batch statistics; also returns the moments so the
    /// caller can update running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, norm::BatchStats<T>)> {
        let (y, cache, stats) =
            norm::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok((
            self.push(
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    cache,
                },
                y,
            ),
            stats,
        ))
    }

    /// Batch norm with fixed statistics, which are treated as constants.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let (y, inv_std) = norm::batchnorm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mean,
            var,
            eps,
        )?;
        Ok(self.push(
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
            y,
        ))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::maxpool2(self.value(x))?;
        if let Some(h) = self.branches.as_mut() {
            argmax.hash(h);
        }
        Ok(self.push(Op::MaxPool2 { x, argmax }, y))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool(x), y))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Linear { x, w, b }, y))
    }

    /// Mean softmax cross-entropy; the scalar loss node. Probabilities are
    /// available through [`Tape::probabilities`].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Softmax output saved by a cross-entropy node.
    pub fn probabilities(&self, loss: Var) -> Option<&Tensor<T>> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// `0.5 * sum(x^2)`.
    pub fn half_sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum::<T>() * T::from_f64(0.5);
        self.push(Op::HalfSumSquares(x), Tensor::scalar(s))
    }

    /// Reverse pass from a scalar `loss`, seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(PcnError::Contract(format!("unknown variable {}", loss.0)));
        }
        if self.value(loss).numel() != 1 {
            return Err(PcnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one())?);

        for i in (0..=loss.0).rev() {
            let (before, rest) = slots.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else {
                continue;
            };
            let node = &self.nodes[i];
            let mut contributions = self.node_backward(&node.op, g)?;
            if self.fault == Some(node.op.kind()) {
                let bump = T::from_f64(1.1);
                for (_, c) in contributions.iter_mut() {
                    *c = c.map(|v| v * bump);
                }
            }
            for (input, grad) in contributions {
                accumulate(&mut before[input.0], grad)?;
            }
        }
        Ok(Gradients { slots })
    }

    fn node_backward(&self, op: &Op<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        Ok(match op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Relu(x) => vec![(*x, ops::relu_backward(val(*x), g)?)],
            Op::ScaleChannels { x, scale } => {
                let (dx, ds) = ops::scale_channels_backward(val(*x), val(*scale), g)?;
                vec![(*x, dx), (*scale, ds)]
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = ops::conv2d_backward(val(*x), val(*w), g, *geom)?;
                vec![(*x, dx), (*w, dw)]
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let (dx, dw) = ops::conv_transpose2d_backward(val(*x), val(*w), g, *geom)?;
                vec![(*x, dx), (*w, dw)]
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = norm::batchnorm_train_backward(g, val(*gamma), cache)?;
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (dx, dg, db) =
                    norm::batchnorm_eval_backward(g, val(*x), val(*gamma), mean, inv_std)?;
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::MaxPool2 { x, argmax } => {
                vec![(*x, ops::maxpool2_backward(val(*x).shape(), argmax, g)?)]
            }
            Op::GlobalAvgPool(x) => {
                vec![(*x, ops::global_avg_pool_backward(val(*x).shape(), g)?)]
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(val(*x), val(*w), g)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let up = g.data()[0];
                vec![(
                    *logits,
                    ops::softmax_cross_entropy_backward(probs, labels, up)?,
                )]
            }
            Op::Sum(x) => {
                let up = g.data()[0];
                vec![(*x, Tensor::full(val(*x).shape(), up)?)]
            }
            Op::HalfSumSquares(x) => {
                let up = g.data()[0];
                vec![(*x, val(*x).map(|v| v * up))]
            }
        })
    }
}
