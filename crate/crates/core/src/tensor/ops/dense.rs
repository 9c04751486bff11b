use super::{BackwardCtx, LocalGrads};
use crate::error::{Error, Result};
use crate::tensor::element::gemm;
use crate::tensor::graph::Op;
use crate::tensor::{Element, Graph, NodeId, Tensor};

impl<T: Element> Graph<T> {
    /// Affine map `x @ w + b` for `x: N×D`, `w: D×K`, `b: K`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.check(x)?, self.check(w)?);
        let (n, d) = xv.dims2("dense")?;
        let (d2, k) = wv.dims2("dense")?;
        if d != d2 {
            return Err(Error::invalid(
                "dense",
                format!("input width {d} but weight has {d2} rows"),
            ));
        }
        let mut out = vec![T::zero(); n * k];
        gemm(false, false, n, k, d, xv.data(), wv.data(), &mut out, false);
        if let Some(b) = bias {
            let bv = self.check(b)?;
            if bv.shape() != [k] {
                return Err(Error::ShapeMismatch {
                    op: "dense",
                    expected: vec![k],
                    got: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(k) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o += b);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(Tensor::from_parts(vec![n, k], out), Op::Dense, inputs)
    }
}

pub(crate) fn backward<T: Element>(ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    let dx = ctx.need[0].then(|| {
        let mut g = vec![T::zero(); n * d];
        gemm(false, true, n, d, k, ctx.grad, w.data(), &mut g, false);
        g
    });
    let dw = ctx.need[1].then(|| {
        let mut g = vec![T::zero(); d * k];
        gemm(true, false, d, k, n, x.data(), ctx.grad, &mut g, false);
        g
    });
    let mut out = vec![dx, dw];
    if ctx.inputs.len() == 3 {
        out.push(ctx.need[2].then(|| {
            let mut g = vec![T::zero(); k];
            for row in ctx.grad.chunks(k) {
                g.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
            g
        }));
    }
    out
}
