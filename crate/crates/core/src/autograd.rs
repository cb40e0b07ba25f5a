//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations on a [`Tape`] compute their value eagerly and, while the tape
//! is recording, append a [`TapeNode`] that remembers its inputs. Node ids
//! are assigned in execution order, so walking ids backwards is a valid
//! reverse topological order.
//!
//! A tape created with [`Tape::inference`] records nothing: intermediate
//! values are dropped as soon as the last [`Var`] referring to them goes
//! away.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvParams, Real, Shape, Tensor};

type NodeId = usize;

/// Handle to a value produced on a tape.
#[derive(Clone, Debug)]
pub struct Var<T: Real> {
    id: Option<NodeId>,
    value: Arc<Tensor<T>>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    /// Whether gradients can flow into this value.
    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|v| (*v).clone())
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Option<NodeId>,
        weights: Option<NodeId>,
        bias: Option<NodeId>,
        x: Arc<Tensor<T>>,
        w: Arc<Tensor<T>>,
        params: ConvParams,
    },
    Relu {
        input: Option<NodeId>,
    },
    Sigmoid {
        input: Option<NodeId>,
    },
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    AffineGate {
        x: Option<NodeId>,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        x_val: Arc<Tensor<T>>,
        gamma_val: Arc<Tensor<T>>,
    },
    Concat {
        parts: Vec<(Option<NodeId>, usize)>,
    },
    PixelShuffle {
        input: Option<NodeId>,
        r: usize,
    },
    Mean {
        input: Option<NodeId>,
        shape: Shape,
    },
    L1 {
        pred: Option<NodeId>,
        target: Option<NodeId>,
        pred_val: Arc<Tensor<T>>,
        target_val: Arc<Tensor<T>>,
    },
}

/// One recorded operation: its kind, the nodes it read, and its output.
#[derive(Debug)]
pub struct TapeNode<T: Real> {
    op: Op<T>,
    value: Arc<Tensor<T>>,
}

impl<T: Real> TapeNode<T> {
    pub fn kind(&self) -> &'static str {
        match self.op {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::AffineGate { .. } => "affine_gate",
            Op::Concat { .. } => "concat_channels",
            Op::PixelShuffle { .. } => "pixel_shuffle",
            Op::Mean { .. } => "mean",
            Op::L1 { .. } => "l1_loss",
        }
    }

    pub fn inputs(&self) -> Vec<usize> {
        let ids: Vec<Option<NodeId>> = match &self.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weights,
                bias,
                ..
            } => vec![*input, *weights, *bias],
            Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::PixelShuffle { input, .. }
            | Op::Mean { input, .. } => vec![*input],
            Op::Add { a, b } => vec![*a, *b],
            Op::AffineGate { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts } => parts.iter().map(|p| p.0).collect(),
            Op::L1 { pred, target, .. } => vec![*pred, *target],
        };
        ids.into_iter().flatten().collect()
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }
}

#[derive(Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<TapeNode<T>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates without recording anything.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn nodes(&self) -> &[TapeNode<T>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var<T> {
        let value = Arc::new(value);
        if !self.recording {
            return Var { id: None, value };
        }
        let id = self.nodes.len();
        self.nodes.push(TapeNode {
            op,
            value: value.clone(),
        });
        Var {
            id: Some(id),
            value,
        }
    }

    /// A differentiable leaf (parameter or input we want gradients for).
    pub fn var(&mut self, value: Tensor<T>) -> Var<T> {
        self.push(Op::Leaf, value)
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Arc::new(value),
        }
    }

    pub fn conv2d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        params: ConvParams,
    ) -> Result<Var<T>> {
        let out = tensor::conv2d(&x.value, &w.value, b.map(|b| &*b.value), params)?;
        Ok(self.push(
            Op::Conv2d {
                input: x.id,
                weights: w.id,
                bias: b.and_then(|b| b.id),
                x: x.value.clone(),
                w: w.value.clone(),
                params,
            },
            out,
        ))
    }

    pub fn relu(&mut self, x: &Var<T>) -> Var<T> {
        let out = tensor::relu(&x.value);
        self.push(Op::Relu { input: x.id }, out)
    }

    pub fn sigmoid(&mut self, x: &Var<T>) -> Var<T> {
        let out = tensor::sigmoid(&x.value);
        self.push(Op::Sigmoid { input: x.id }, out)
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = tensor::add(&a.value, &b.value)?;
        Ok(self.push(Op::Add { a: a.id, b: b.id }, out))
    }

    /// `(gamma + 1) * x + beta`.
    pub fn affine_gate(&mut self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
        let out = tensor::affine_gate(&x.value, &gamma.value, &beta.value)?;
        Ok(self.push(
            Op::AffineGate {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                x_val: x.value.clone(),
                gamma_val: gamma.value.clone(),
            },
            out,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| &*p.value).collect();
        let out = tensor::concat_channels(&values)?;
        let parts = parts.iter().map(|p| (p.id, p.shape().c)).collect();
        Ok(self.push(Op::Concat { parts }, out))
    }

    pub fn pixel_shuffle(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let out = tensor::pixel_shuffle(&x.value, r)?;
        Ok(self.push(Op::PixelShuffle { input: x.id, r }, out))
    }

    /// Mean over all elements, as a `(1, 1, 1, 1)` tensor.
    pub fn mean(&mut self, x: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(x.value.mean());
        self.push(
            Op::Mean {
                input: x.id,
                shape: x.shape(),
            },
            out,
        )
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        tensor::same_shape("l1_loss", &pred.value, &target.value)?;
        let total: T = pred
            .value
            .data()
            .iter()
            .zip(target.value.data())
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        let out = Tensor::scalar(total / T::from_usize(pred.value.len()).unwrap());
        Ok(self.push(
            Op::L1 {
                pred: pred.id,
                target: target.id,
                pred_val: pred.value.clone(),
                target_val: target.value.clone(),
            },
            out,
        ))
    }

    /// Propagates d(loss)/d(node) back through the tape.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.shape() != Shape::scalar() {
            return Err(Error::shape(
                "backward",
                "loss",
                format!("loss must be scalar, got {}", loss.shape()),
            ));
        }
        let root = loss
            .id
            .ok_or_else(|| Error::invalid("backward", "loss was not recorded on this tape"))?;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root] = Some(Tensor::scalar(T::one()));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            for (target, contrib) in node_backward(node, &g)? {
                debug_assert!(target < id, "tape order violated");
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn node_backward<T: Real>(node: &TapeNode<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weights,
            bias,
            x,
            w,
            params,
        } => {
            if input.is_some() || weights.is_some() || bias.is_some() {
                let (dx, dw, db) = tensor::conv2d_backward(x, w, g, *params)?;
                if let Some(i) = input {
                    out.push((*i, dx));
                }
                if let Some(i) = weights {
                    out.push((*i, dw));
                }
                if let Some(i) = bias {
                    out.push((*i, db));
                }
            }
        }
        Op::Relu { input } => {
            if let Some(i) = input {
                out.push((
                    *i,
                    node.value.zip_map(g, "relu_backward", |y, g| {
                        if y > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    })?,
                ));
            }
        }
        Op::Sigmoid { input } => {
            if let Some(i) = input {
                out.push((
                    *i,
                    node.value
                        .zip_map(g, "sigmoid_backward", |y, g| g * y * (T::one() - y))?,
                ));
            }
        }
        Op::Add { a, b } => {
            for i in [a, b].into_iter().flatten() {
                out.push((*i, g.clone()));
            }
        }
        Op::AffineGate {
            x,
            gamma,
            beta,
            x_val,
            gamma_val,
        } => {
            if let Some(i) = x {
                out.push((
                    *i,
                    gamma_val.zip_map(g, "affine_gate_backward", |gm, g| (gm + T::one()) * g)?,
                ));
            }
            if let Some(i) = gamma {
                out.push((*i, x_val.zip_map(g, "affine_gate_backward", |x, g| x * g)?));
            }
            if let Some(i) = beta {
                out.push((*i, g.clone()));
            }
        }
        Op::Concat { parts } => {
            let mut start = 0;
            for &(id, c) in parts {
                if let Some(i) = id {
                    out.push((i, tensor::slice_channels(g, start, c)?));
                }
                start += c;
            }
        }
        Op::PixelShuffle { input, r } => {
            if let Some(i) = input {
                out.push((*i, tensor::pixel_unshuffle(g, *r)?));
            }
        }
        Op::Mean { input, shape } => {
            if let Some(i) = input {
                let scale = g.data()[0] / T::from_usize(shape.len()).unwrap();
                out.push((*i, Tensor::full(*shape, scale)));
            }
        }
        Op::L1 {
            pred,
            target,
            pred_val,
            target_val,
        } => {
            let scale = g.data()[0] / T::from_usize(pred_val.len()).unwrap();
            let sign = pred_val.zip_map(target_val, "l1_backward", |p, t| {
                if p > t {
                    scale
                } else if p < t {
                    -scale
                } else {
                    T::zero()
                }
            })?;
            if let Some(i) = target {
                out.push((*i, sign.scale(-T::one())));
            }
            if let Some(i) = pred {
                out.push((*i, sign));
            }
        }
    }
    Ok(out)
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` for untracked values.
    /// Tracked values off every path to the loss get zeros.
    pub fn get(&self, v: &Var<T>) -> Option<Tensor<T>> {
        let id = v.id?;
        Some(match self.grads.get(id)? {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id]),
        })
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        let id = v.id?;
        let shape = *self.shapes.get(id)?;
        Some(self.grads[id].take().unwrap_or_else(|| Tensor::zeros(shape)))
    }
}
