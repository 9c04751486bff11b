use super::{BackwardCtx, LocalGrads};
use crate::error::Result;
use crate::tensor::graph::Op;
use crate::tensor::{Element, Graph, NodeId, Tensor};

fn row_softmax<T: Element>(row: &[T], out: &mut Vec<T>, log: bool) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: f64 = row.iter().map(|&v| (v - max).as_f64().exp()).sum();
    if log {
        let lse = sum.ln();
        out.extend(row.iter().map(|&v| T::from_f64((v - max).as_f64() - lse)));
    } else {
        out.extend(row.iter().map(|&v| T::from_f64((v - max).as_f64().exp() / sum)));
    }
}

/// Row-wise softmax of an `N×K` tensor, stabilised by max subtraction.
pub fn softmax_rows<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = x.dims2("softmax")?;
    let mut out = Vec::with_capacity(n * k);
    x.data().chunks(k).for_each(|r| row_softmax(r, &mut out, false));
    Ok(Tensor::from_parts(vec![n, k], out))
}

impl<T: Element> Graph<T> {
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let out = softmax_rows(self.check(x)?)?;
        self.push(out, Op::Softmax, vec![x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.check(x)?;
        let (n, k) = v.dims2("log_softmax")?;
        let mut out = Vec::with_capacity(n * k);
        v.data().chunks(k).for_each(|r| row_softmax(r, &mut out, true));
        self.push(Tensor::from_parts(vec![n, k], out), Op::LogSoftmax, vec![x])
    }
}

pub(crate) fn softmax_backward<T: Element>(ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let k = ctx.output.shape()[1];
    let mut dx = Vec::with_capacity(ctx.grad.len());
    for (g, y) in ctx.grad.chunks(k).zip(ctx.output.data().chunks(k)) {
        let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
        dx.extend(g.iter().zip(y).map(|(&a, &b)| b * (a - dot)));
    }
    vec![Some(dx)]
}

pub(crate) fn log_softmax_backward<T: Element>(ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let k = ctx.output.shape()[1];
    let mut dx = Vec::with_capacity(ctx.grad.len());
    for (g, ly) in ctx.grad.chunks(k).zip(ctx.output.data().chunks(k)) {
        let total: T = g.iter().copied().sum();
        dx.extend(g.iter().zip(ly).map(|(&a, &l)| a - l.exp() * total));
    }
    vec![Some(dx)]
}
