use serde::{Deserialize, Serialize};

use super::conv::{out_len, Padding};
use super::{BackwardCtx, LocalGrads};
use crate::error::{Error, Result};
use crate::tensor::graph::Op;
use crate::tensor::{Element, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

pub(crate) struct PoolSaved {
    kind: PoolKind,
    in_shape: [usize; 4],
    /// For max pooling: flat input index of the winning element per output.
    /// For average pooling: number of in-bounds elements per output position.
    routes: Vec<usize>,
    window: usize,
    stride: usize,
    pad: (usize, usize),
    out_hw: (usize, usize),
}

fn pool_forward<T: Element>(
    x: &Tensor<T>,
    kind: PoolKind,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, PoolSaved)> {
    let (n, c, h, w) = x.dims4("pool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::invalid("pool2d", "window and stride must be positive"));
    }
    let too_big = || Error::invalid("pool2d", format!("window {window} larger than input {h}x{w}"));
    let (oh, pt) = out_len(h, window, stride, padding).ok_or_else(too_big)?;
    let (ow, pl) = out_len(w, window, stride, padding).ok_or_else(too_big)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut routes = Vec::with_capacity(match kind {
        PoolKind::Max => n * c * oh * ow,
        PoolKind::Avg => oh * ow,
    });
    let span = |o: usize, pad: usize, len: usize| {
        let start = (o * stride) as isize - pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + window as isize) as usize).min(len);
        lo..hi
    };
    if kind == PoolKind::Avg {
        for oy in 0..oh {
            for ox in 0..ow {
                routes.push(span(oy, pt, h).len() * span(ox, pl, w).len());
            }
        }
    }
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, xs) = (span(oy, pt, h), span(ox, pl, w));
                match kind {
                    PoolKind::Max => {
                        let mut best = base + ys.start * w + xs.start;
                        for iy in ys.clone() {
                            for ix in xs.clone() {
                                let idx = base + iy * w + ix;
                                if xd[idx] > xd[best] {
                                    best = idx;
                                }
                            }
                        }
                        routes.push(best);
                        out.push(xd[best]);
                    }
                    PoolKind::Avg => {
                        let mut acc = 0.0f64;
                        for iy in ys.clone() {
                            for ix in xs.clone() {
                                acc += xd[base + iy * w + ix].as_f64();
                            }
                        }
                        out.push(T::from_f64(acc / (ys.len() * xs.len()) as f64));
                    }
                }
            }
        }
    }
    let saved = PoolSaved {
        kind,
        in_shape: [n, c, h, w],
        routes,
        window,
        stride,
        pad: (pt, pl),
        out_hw: (oh, ow),
    };
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), saved))
}

/// Max or average pooling over square windows. Average pooling with
/// [`Padding::Same`] divides by the number of in-bounds elements.
pub fn pool2d<T: Element>(
    x: &Tensor<T>,
    kind: PoolKind,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    pool_forward(x, kind, window, stride, padding).map(|(t, _)| t)
}

impl<T: Element> Graph<T> {
    pub fn pool2d(
        &mut self,
        x: NodeId,
        kind: PoolKind,
        window: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (out, saved) = pool_forward(self.check(x)?, kind, window, stride, padding)?;
        self.push(out, Op::Pool2d(saved), vec![x])
    }
}

pub(crate) fn backward<T: Element>(s: &PoolSaved, ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let [n, c, h, w] = s.in_shape;
    let mut dx = vec![T::zero(); n * c * h * w];
    match s.kind {
        PoolKind::Max => {
            for (g, &idx) in ctx.grad.iter().zip(&s.routes) {
                dx[idx] += *g;
            }
        }
        PoolKind::Avg => {
            let (oh, ow) = s.out_hw;
            let (pt, pl) = s.pad;
            for plane in 0..n * c {
                for oy in 0..oh {
                    let y0 = ((oy * s.stride) as isize - pt as isize).max(0) as usize;
                    let y1 = ((oy * s.stride + s.window) as isize - pt as isize).min(h as isize) as usize;
                    for ox in 0..ow {
                        let x0 = ((ox * s.stride) as isize - pl as isize).max(0) as usize;
                        let x1 = ((ox * s.stride + s.window) as isize - pl as isize).min(w as isize) as usize;
                        let g = ctx.grad[(plane * oh + oy) * ow + ox] / T::from_f64(s.routes[oy * ow + ox] as f64);
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                dx[plane * h * w + iy * w + ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    vec![Some(dx)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Tensor<f64> {
        Tensor::from_f64([1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap()
    }

    #[test]
    fn avg_of_square_is_two_and_a_half() {
        let y = pool2d(&square(), PoolKind::Avg, 2, 2, Padding::Valid).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn max_of_square_is_four() {
        let y = pool2d(&square(), PoolKind::Max, 2, 2, Padding::Valid).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn max_routes_gradient_to_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.param(square());
        let y = g.pool2d(x, PoolKind::Max, 2, 2, Padding::Valid).unwrap();
        let l = g.sum_all(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0., 0., 0., 1.]);
    }

    #[test]
    fn avg_distributes_uniformly() {
        let mut g = Graph::<f64>::new();
        let x = g.param(square());
        let y = g.pool2d(x, PoolKind::Avg, 2, 2, Padding::Valid).unwrap();
        let l = g.sum_all(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn window_larger_than_input_fails() {
        assert!(pool2d(&square(), PoolKind::Max, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn same_avg_pool_preserves_size_and_constants() {
        let x = Tensor::<f64>::full([1, 2, 5, 5], 3.0);
        let y = pool2d(&x, PoolKind::Avg, 3, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 2, 5, 5]);
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }
}
