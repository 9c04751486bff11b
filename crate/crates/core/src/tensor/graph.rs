use std::collections::BTreeMap;
use std::sync::Arc;

use super::ops::{self, BackwardCtx};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
pub trait CustomOp<T: Element>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Gradient with respect to each input given the output gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>>;
}

pub(crate) enum Op<T: Element> {
    Leaf,
    Conv2d(ops::conv::ConvGeom),
    Pool2d(ops::pool::PoolSaved),
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Sigmoid,
    Scale(f64),
    AddScalar,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Reshape,
    Dense,
    Softmax,
    LogSoftmax,
    Reduce(ops::reduce::ReduceSaved),
    BatchNorm(ops::batchnorm::BnSaved),
    ChannelScale,
    Upsample { factor: usize },
    Custom(Arc<dyn CustomOp<T>>),
}

impl<T: Element> Op<T> {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d(_) => "conv2d",
            Op::Pool2d(_) => "pool2d",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Sigmoid => "sigmoid",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::Dense => "dense",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Reduce(_) => "reduce",
            Op::BatchNorm(_) => "batch_norm",
            Op::ChannelScale => "channel_scale",
            Op::Upsample { .. } => "upsample",
            Op::Custom(c) => return c.name().to_string(),
        }
        .to_string()
    }
}

pub(crate) struct Node<T: Element> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<NodeId>,
    trainable: bool,
    requires_grad: bool,
}

/// Recorded computation supporting reverse-mode differentiation.
///
/// Node ids are assigned in insertion order and every node only refers to
/// earlier nodes, so the node list is a topological order by construction.
pub struct Graph<T: Element = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, Vec::new(), false)
    }

    /// Trainable leaf; always receives a gradient from [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, Vec::new(), true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    /// Ids of the trainable leaves in insertion order.
    pub fn parameters(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].trainable)
            .map(NodeId)
            .collect()
    }

    pub fn inputs_of(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Checks the topological-order invariant over the whole graph.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.inputs.iter().all(|inp| inp.0 < i))
    }

    pub(crate) fn check(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.nodes.get(id.0).map(|n| &n.value).ok_or(Error::UnknownNode {
            id: id.0,
            len: self.nodes.len(),
        })
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<NodeId>, trainable: bool) -> NodeId {
        let requires_grad = trainable || inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            trainable,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<NodeId>) -> Result<NodeId> {
        for &i in &inputs {
            self.check(i)?;
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push_unchecked(value, op, inputs, false))
    }

    /// Apply a user-defined operation.
    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[NodeId]) -> Result<NodeId> {
        let values = inputs.iter().map(|&i| self.check(i)).collect::<Result<Vec<_>>>()?;
        let out = op.forward(&values)?;
        self.push(out, Op::Custom(op), inputs.to_vec())
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// trainable leaf. Leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let value = self.check(loss)?;
        if value.numel() != 1 {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = BTreeMap::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.trainable {
                out.insert(NodeId(id), Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let need: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let ctx = BackwardCtx {
                inputs: &inputs,
                output: &node.value,
                grad: &g,
                need: &need,
            };
            let local = ops::backward(&node.op, &ctx)?;
            debug_assert_eq!(local.len(), node.inputs.len());
            for (inp, lg) in node.inputs.iter().zip(local) {
                let Some(lg) = lg else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&lg).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(lg),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable && !out.contains_key(&NodeId(i)) {
                out.insert(NodeId(i), Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradient buffers keyed by trainable node.
#[derive(Clone, Debug)]
pub struct Gradients<T: Element = f32> {
    grads: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_f64([2, 3], &[1., -2., 3., 4., 5., -6.]).unwrap());
        let loss = g.sum_all(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn relu_of_negated_positive_params_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_f64([4], &[0.5, 1.0, 2.0, 3.0]).unwrap());
        let neg = g.scale(p, -1.0).unwrap();
        let r = g.relu(neg).unwrap();
        let loss = g.sum_all(r).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn unreachable_parameters_get_zeros() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_f64([2], &[1., 2.]).unwrap());
        let q = g.param(Tensor::from_f64([3], &[1., 2., 3.]).unwrap());
        let loss = g.sum_all(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get(q).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_f64([2], &[1., 2.]).unwrap());
        assert!(matches!(g.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_f64([1], &[3.0]).unwrap());
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn foreign_node_ids_are_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::scalar(1.0));
        let mut other = Graph::<f64>::new();
        assert!(matches!(other.relu(p), Err(Error::UnknownNode { .. })));
    }

    #[test]
    fn overflow_is_reported_as_non_finite() {
        let mut g = Graph::<f32>::new();
        let p = g.input(Tensor::from_f64([1], &[1000.0]).unwrap());
        assert!(matches!(g.exp(p), Err(Error::NonFinite { .. })));
    }
}
