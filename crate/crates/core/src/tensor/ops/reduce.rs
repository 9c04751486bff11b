use serde::{Deserialize, Serialize};

use super::{BackwardCtx, LocalGrads};
use crate::error::{Error, Result};
use crate::tensor::graph::Op;
use crate::tensor::{Element, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceKind {
    Sum,
    Mean,
}

pub(crate) struct ReduceSaved {
    kind: ReduceKind,
    /// Output flat index for every input element.
    map: Vec<usize>,
    count: usize,
}

/// Output flat index of every input element when `reduced` axes collapse.
fn index_map(shape: &[usize], reduced: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    // stride of each input axis in the output (0 for reduced axes)
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        if !reduced[d] {
            strides[d] = acc;
            acc *= shape[d];
        }
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut out = 0usize;
    for _ in 0..n {
        map.push(out);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            out += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            out -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    (map, out_shape)
}

impl<T: Element> Graph<T> {
    /// Sum or mean over `axes`, removing them from the shape. Accumulates in
    /// `f64`. An empty axis list is the identity.
    pub fn reduce(&mut self, x: NodeId, kind: ReduceKind, axes: &[usize]) -> Result<NodeId> {
        let v = self.check(x)?;
        let shape = v.shape().to_vec();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || reduced[a] {
                return Err(Error::invalid(
                    "reduce",
                    format!("invalid axis {a} for shape {shape:?}"),
                ));
            }
            reduced[a] = true;
        }
        let (map, out_shape) = index_map(&shape, &reduced);
        let out_len: usize = out_shape.iter().product();
        let count = v.numel() / out_len;
        let mut acc = vec![0.0f64; out_len];
        for (&o, &val) in map.iter().zip(v.data()) {
            acc[o] += val.as_f64();
        }
        if kind == ReduceKind::Mean {
            acc.iter_mut().for_each(|a| *a /= count as f64);
        }
        let out = Tensor::from_parts(out_shape, acc.into_iter().map(T::from_f64).collect());
        self.push(out, Op::Reduce(ReduceSaved { kind, map, count }), vec![x])
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.check(x)?.ndim()).collect();
        self.reduce(x, ReduceKind::Sum, &axes)
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.check(x)?.ndim()).collect();
        self.reduce(x, ReduceKind::Mean, &axes)
    }

    /// Mean over the spatial axes of an NCHW tensor, giving `N×C`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?.dims4("global_avg_pool")?;
        self.reduce(x, ReduceKind::Mean, &[2, 3])
    }
}

pub(crate) fn backward<T: Element>(s: &ReduceSaved, ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let scale = match s.kind {
        ReduceKind::Sum => T::one(),
        ReduceKind::Mean => T::from_f64(1.0 / s.count as f64),
    };
    vec![Some(s.map.iter().map(|&o| ctx.grad[o] * scale).collect())]
}
