use super::{BackwardCtx, LocalGrads};
use crate::error::{Error, Result};
use crate::tensor::graph::Op;
use crate::tensor::{Element, Graph, NodeId, Tensor};

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Graph<T> {
    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let shape0 = self.check(first)?.shape().to_vec();
        if axis >= shape0.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {shape0:?}"),
            ));
        }
        let mut total = 0;
        for &i in inputs {
            let s = self.check(i)?.shape();
            let compatible =
                s.len() == shape0.len() && s.iter().zip(&shape0).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    expected: shape0.clone(),
                    got: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&shape0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in inputs {
                let v = &self.nodes[i.0].value;
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = shape0;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, data), Op::Concat { axis }, inputs.to_vec())
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            self.check(i)?.dims4("concat_channels")?;
        }
        self.concat(inputs, 1)
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.check(x)?;
        let shape = v.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Tensor::from_parts(out_shape, data), Op::Slice { axis, start }, vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.check(x)?.reshape(shape.to_vec())?;
        self.push(out, Op::Reshape, vec![x])
    }

    /// Scale each `(n, c)` plane of an NCHW tensor by `weights[n, c]`.
    pub fn channel_scale(&mut self, x: NodeId, weights: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.check(x)?, self.check(weights)?);
        let (n, c, h, w) = xv.dims4("channel_scale")?;
        if wv.shape() != [n, c] {
            return Err(Error::ShapeMismatch {
                op: "channel_scale",
                expected: vec![n, c],
                got: wv.shape().to_vec(),
            });
        }
        let hw = h * w;
        let data = xv
            .data()
            .chunks(hw)
            .zip(wv.data())
            .flat_map(|(plane, &s)| plane.iter().map(move |&v| v * s))
            .collect();
        self.push(
            Tensor::from_parts(xv.shape().to_vec(), data),
            Op::ChannelScale,
            vec![x, weights],
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let v = self.check(x)?;
        let (n, c, h, w) = v.dims4("upsample")?;
        if factor == 0 {
            return Err(Error::invalid("upsample", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in v.data().chunks(h * w) {
            for oy in 0..oh {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    data.push(row[ox / factor]);
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![n, c, oh, ow], data),
            Op::Upsample { factor },
            vec![x],
        )
    }
}

pub(crate) fn concat_backward<T: Element>(axis: usize, ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let out_shape = ctx.output.shape();
    let (outer, total, inner) = split_at_axis(out_shape, axis);
    let mut offset = 0;
    ctx.inputs
        .iter()
        .zip(ctx.need)
        .map(|(inp, &need)| {
            let len = inp.shape()[axis];
            let start = offset;
            offset += len;
            need.then(|| {
                let mut g = Vec::with_capacity(inp.numel());
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    g.extend_from_slice(&ctx.grad[base..base + len * inner]);
                }
                g
            })
        })
        .collect()
}

pub(crate) fn slice_backward<T: Element>(axis: usize, start: usize, ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let in_shape = ctx.inputs[0].shape();
    let (outer, full, inner) = split_at_axis(in_shape, axis);
    let len = ctx.output.shape()[axis];
    let mut g = vec![T::zero(); ctx.inputs[0].numel()];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        let src = o * len * inner;
        g[dst..dst + len * inner].copy_from_slice(&ctx.grad[src..src + len * inner]);
    }
    vec![Some(g)]
}

pub(crate) fn channel_scale_backward<T: Element>(ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let x = ctx.inputs[0];
    let w = ctx.inputs[1].data();
    let shape = x.shape();
    let hw = shape[2] * shape[3];
    let dx = ctx.need[0].then(|| {
        ctx.grad
            .chunks(hw)
            .zip(w)
            .flat_map(|(g, &s)| g.iter().map(move |&v| v * s))
            .collect()
    });
    let dw = ctx.need[1].then(|| {
        ctx.grad
            .chunks(hw)
            .zip(x.data().chunks(hw))
            .map(|(g, xv)| g.iter().zip(xv).map(|(&a, &b)| a * b).sum())
            .collect()
    });
    vec![dx, dw]
}

pub(crate) fn upsample_backward<T: Element>(factor: usize, ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let shape = ctx.inputs[0].shape();
    let (h, w) = (shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut g = vec![T::zero(); ctx.inputs[0].numel()];
    for (plane, gout) in g.chunks_mut(h * w).zip(ctx.grad.chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                plane[(oy / factor) * w + ox / factor] += gout[oy * ow + ox];
            }
        }
    }
    vec![Some(g)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_channels_shapes_and_order() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::full([1, 2, 4, 4], 1.0));
        let b = g.input(Tensor::full([1, 3, 4, 4], 2.0));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[1, 5, 4, 4]);
        assert!(g.value(c).data()[..32].iter().all(|&v| v == 1.0));
        assert!(g.value(c).data()[32..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn concat_single_input_is_identity() {
        let mut g = Graph::<f64>::new();
        let mut rng = rand::rng();
        let t = Tensor::randn([2, 3, 2, 2], 1.0, &mut rng);
        let a = g.input(t.clone());
        let c = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(c), &t);
    }

    #[test]
    fn concat_gradient_splits_back_as_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros([2, 2, 3, 3]));
        let b = g.param(Tensor::zeros([2, 1, 3, 3]));
        let c = g.concat_channels(&[a, b]).unwrap();
        let l = g.sum_all(c).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros([1, 2, 4, 4]));
        let b = g.input(Tensor::zeros([1, 2, 4, 5]));
        assert!(g.concat_channels(&[a, b]).is_err());
        let c = g.input(Tensor::zeros([2, 2, 4, 4]));
        assert!(g.concat_channels(&[a, c]).is_err());
    }

    #[test]
    fn slice_recovers_concat_parts() {
        let mut g = Graph::<f32>::new();
        let mut rng = rand::rng();
        let ta = Tensor::randn([2, 2, 3, 3], 1.0, &mut rng);
        let tb = Tensor::randn([2, 3, 3, 3], 1.0, &mut rng);
        let a = g.input(ta.clone());
        let b = g.input(tb.clone());
        let c = g.concat_channels(&[a, b]).unwrap();
        let sa = g.slice(c, 1, 0, 2).unwrap();
        let sb = g.slice(c, 1, 2, 3).unwrap();
        assert_eq!(g.value(sa), &ta);
        assert_eq!(g.value(sb), &tb);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let u = g.upsample(a, 2).unwrap();
        assert_eq!(g.value(u).data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
    }
}
