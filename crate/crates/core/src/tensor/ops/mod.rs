//! Differentiable operations. Each submodule holds the forward kernel, the
//! graph-recording method and the local gradient rule for one op family.

pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod elementwise;
pub mod pool;
pub mod reduce;
pub mod shape;
pub mod softmax;

use super::graph::Op;
use super::{Element, Tensor};
use crate::error::Result;

pub(crate) struct BackwardCtx<'a, T: Element> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    /// Which inputs need a gradient.
    pub need: &'a [bool],
}

pub(crate) type LocalGrads<T> = Vec<Option<Vec<T>>>;

pub(crate) fn backward<T: Element>(op: &Op<T>, ctx: &BackwardCtx<'_, T>) -> Result<LocalGrads<T>> {
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Conv2d(geom) => conv::backward(geom, ctx),
        Op::Pool2d(saved) => pool::backward(saved, ctx),
        Op::Add => elementwise::add_backward(ctx),
        Op::Sub => elementwise::sub_backward(ctx),
        Op::Mul => elementwise::mul_backward(ctx),
        Op::Relu => elementwise::relu_backward(ctx),
        Op::Exp => elementwise::exp_backward(ctx),
        Op::Sigmoid => elementwise::sigmoid_backward(ctx),
        Op::Scale(s) => elementwise::scale_backward(*s, ctx),
        Op::AddScalar => vec![Some(ctx.grad.to_vec())],
        Op::Concat { axis } => shape::concat_backward(*axis, ctx),
        Op::Slice { axis, start } => shape::slice_backward(*axis, *start, ctx),
        Op::Reshape => vec![Some(ctx.grad.to_vec())],
        Op::Dense => dense::backward(ctx),
        Op::Softmax => softmax::softmax_backward(ctx),
        Op::LogSoftmax => softmax::log_softmax_backward(ctx),
        Op::Reduce(saved) => reduce::backward(saved, ctx),
        Op::BatchNorm(saved) => batchnorm::backward(saved, ctx),
        Op::ChannelScale => shape::channel_scale_backward(ctx),
        Op::Upsample { factor } => shape::upsample_backward(*factor, ctx),
        Op::Custom(c) => {
            let grad = Tensor::from_parts(ctx.output.shape().to_vec(), ctx.grad.to_vec());
            c.backward(ctx.inputs, ctx.output, &grad)
                .into_iter()
                .map(|t| Some(t.into_data()))
                .collect()
        }
    })
}
