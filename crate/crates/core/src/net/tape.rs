//! Tape-based reverse-mode differentiation.
//!
//! Operations execute eagerly and append a node to the tape; `backward`
//! walks the tape in reverse creation order (a valid topological order,
//! since ops only reference earlier nodes) and accumulates exact analytic
//! gradients. Gradients flow only into nodes that need them: parameters and
//! anything computed from them. Constants (inputs, targets) are skipped.

use crate::error::{Error, Result};
use crate::net::ops;
use crate::net::tensor::{Element, Shape, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<E: Element> {
    Leaf,
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Sigmoid {
        x: NodeId,
    },
    Upsample2x {
        x: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    SoftDice {
        pred: NodeId,
        target: Tensor<E>,
        eps: f64,
        sums: Vec<[E; 3]>,
    },
    WeightedSum {
        x: NodeId,
        weights: Tensor<E>,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    needs_grad: bool,
    op: Op<E>,
}

/// The recording tape. One tape per forward/backward pass.
pub struct Tape<E: Element = f64> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable leaf (input data, targets).
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let value = ops::conv3d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        )?;
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(value, needs, Op::Conv3d { x, w, b, stride, pad }))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let value = ops::leaky_relu_forward(&self.nodes[x.0].value, slope);
        let needs = self.needs(&[x]);
        self.push(value, needs, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = ops::sigmoid_forward(&self.nodes[x.0].value);
        let needs = self.needs(&[x]);
        self.push(value, needs, Op::Sigmoid { x })
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let value = ops::upsample2x_forward(&self.nodes[x.0].value);
        let needs = self.needs(&[x]);
        self.push(value, needs, Op::Upsample2x { x })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::concat_channels_forward(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, needs, Op::ConcatChannels { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::add_forward(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, needs, Op::Add { a, b }))
    }

    /// Soft Dice loss against a constant target; returns a scalar node.
    pub fn soft_dice_loss(&mut self, pred: NodeId, target: Tensor<E>, eps: f64) -> Result<NodeId> {
        let (loss, sums) = ops::soft_dice_forward(&self.nodes[pred.0].value, &target, eps)?;
        let needs = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Op::SoftDice {
                pred,
                target,
                eps,
                sums,
            },
        ))
    }

    /// Scalar reduction with fixed weights; the head used by gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor<E>) -> Result<NodeId> {
        let v = ops::weighted_sum_forward(&self.nodes[x.0].value, &weights)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(v), needs, Op::WeightedSum { x, weights }))
    }

    /// Runs reverse-mode accumulation from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::ShapeMismatch(format!(
                "backward requires a scalar loss, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(E::one()));

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.is_none() || !node.needs_grad {
                continue;
            }
            let g = node.grad.as_ref().expect("checked above");

            // Phase 1: compute input deltas (reads only).
            let mut deltas: Vec<(NodeId, Tensor<E>)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Conv3d { x, w, b, stride, pad } => {
                    if before[x.0].needs_grad {
                        let gx = ops::conv3d_backward_input(
                            g,
                            &before[w.0].value,
                            before[x.0].value.shape(),
                            *stride,
                            *pad,
                        );
                        deltas.push((*x, gx));
                    }
                    if before[w.0].needs_grad {
                        let gw = ops::conv3d_backward_weight(
                            g,
                            &before[x.0].value,
                            before[w.0].value.shape(),
                            *stride,
                            *pad,
                        );
                        deltas.push((*w, gw));
                    }
                    if before[b.0].needs_grad {
                        deltas.push((*b, ops::conv3d_backward_bias(g)));
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    if before[x.0].needs_grad {
                        deltas.push((*x, ops::leaky_relu_backward(g, &before[x.0].value, *slope)));
                    }
                }
                Op::Sigmoid { x } => {
                    if before[x.0].needs_grad {
                        deltas.push((*x, ops::sigmoid_backward(g, &node.value)));
                    }
                }
                Op::Upsample2x { x } => {
                    if before[x.0].needs_grad {
                        deltas.push((*x, ops::upsample2x_backward(g, before[x.0].value.shape())));
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let (ga, gb) = ops::concat_channels_backward(
                        g,
                        before[a.0].value.shape(),
                        before[b.0].value.shape(),
                    );
                    if before[a.0].needs_grad {
                        deltas.push((*a, ga));
                    }
                    if before[b.0].needs_grad {
                        deltas.push((*b, gb));
                    }
                }
                Op::Add { a, b } => {
                    if before[a.0].needs_grad {
                        deltas.push((*a, g.clone()));
                    }
                    if before[b.0].needs_grad {
                        deltas.push((*b, g.clone()));
                    }
                }
                Op::SoftDice {
                    pred,
                    target,
                    eps,
                    sums,
                } => {
                    if before[pred.0].needs_grad {
                        let gp = ops::soft_dice_backward(
                            g.item()?,
                            &before[pred.0].value,
                            target,
                            sums,
                            *eps,
                        );
                        deltas.push((*pred, gp));
                    }
                }
                Op::WeightedSum { x, weights } => {
                    if before[x.0].needs_grad {
                        deltas.push((*x, ops::weighted_sum_backward(g.item()?, weights)));
                    }
                }
            }

            // Phase 2: accumulate into the inputs.
            for (id, delta) in deltas {
                let slot = &mut before[id.0].grad;
                match slot {
                    None => *slot = Some(delta),
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a = *a + *d;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
