use super::{BackwardCtx, LocalGrads};
use crate::error::{Error, Result};
use crate::tensor::graph::Op;
use crate::tensor::{Element, Graph, NodeId, Tensor};

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    fn binary(&mut self, op: Op<T>, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, op, vec![a, b])
    }

    fn unary(&mut self, op: Op<T>, a: NodeId, f: impl Fn(T) -> T) -> Result<NodeId> {
        let av = self.check(a)?;
        let out = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect());
        self.push(out, op, vec![a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    /// Rectified linear unit; the gradient at exactly zero is zero.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, a, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, a, |x| x.exp())
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, a, |x| T::one() / (T::one() + (-x).exp()))
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let st = T::from_f64(s);
        self.unary(Op::Scale(s), a, |x| x * st)
    }

    /// Add a scalar constant.
    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let st = T::from_f64(s);
        self.unary(Op::AddScalar, a, |x| x + st)
    }
}

pub(crate) fn add_backward<T: Element>(ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    vec![
        ctx.need[0].then(|| ctx.grad.to_vec()),
        ctx.need[1].then(|| ctx.grad.to_vec()),
    ]
}

pub(crate) fn sub_backward<T: Element>(ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    vec![
        ctx.need[0].then(|| ctx.grad.to_vec()),
        ctx.need[1].then(|| ctx.grad.iter().map(|&g| -g).collect()),
    ]
}

pub(crate) fn mul_backward<T: Element>(ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
    vec![
        ctx.need[0].then(|| ctx.grad.iter().zip(b).map(|(&g, &y)| g * y).collect()),
        ctx.need[1].then(|| ctx.grad.iter().zip(a).map(|(&g, &x)| g * x).collect()),
    ]
}

pub(crate) fn relu_backward<T: Element>(ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let x = ctx.inputs[0].data();
    vec![Some(
        ctx.grad
            .iter()
            .zip(x)
            .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    )]
}

pub(crate) fn exp_backward<T: Element>(ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    vec![Some(
        ctx.grad.iter().zip(ctx.output.data()).map(|(&g, &y)| g * y).collect(),
    )]
}

pub(crate) fn sigmoid_backward<T: Element>(ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    vec![Some(
        ctx.grad
            .iter()
            .zip(ctx.output.data())
            .map(|(&g, &y)| g * y * (T::one() - y))
            .collect(),
    )]
}

pub(crate) fn scale_backward<T: Element>(s: f64, ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let st = T::from_f64(s);
    vec![Some(ctx.grad.iter().map(|&g| g * st).collect())]
}
