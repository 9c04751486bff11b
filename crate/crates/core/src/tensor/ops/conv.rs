use serde::{Deserialize, Serialize};

use super::{BackwardCtx, LocalGrads};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::element::gemm;
use crate::tensor::graph::Op;
use crate::tensor::{Element, Graph, NodeId, Tensor};

/// Samples per partial weight-gradient accumulator. Fixed so the reduction
/// order does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output is `ceil(in / stride)`; zeros are split evenly with the extra
    /// row/column on the bottom/right.
    Same,
    /// No padding; output is `floor((in - k) / stride) + 1`.
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
    has_bias: bool,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1 stride-1 convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

/// Output length and leading pad along one spatial axis.
pub(crate) fn out_len(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (k <= input).then(|| ((input - k) / stride + 1, 0)),
    }
}

fn geometry<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    let (n, c, h, wd) = x.dims4("conv2d")?;
    let (o, i, kh, kw) = w.dims4("conv2d")?;
    if i != c {
        return Err(Error::invalid(
            "conv2d",
            format!("input has {c} channels but kernel expects {i}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![o],
                got: b.shape().to_vec(),
            });
        }
    }
    let too_big = || Error::invalid("conv2d", format!("kernel {kh}x{kw} larger than input {h}x{wd}"));
    let (oh, pad_top) = out_len(h, kh, stride, padding).ok_or_else(too_big)?;
    let (ow, pad_left) = out_len(wd, kw, stride, padding).ok_or_else(too_big)?;
    Ok(ConvGeom {
        n,
        c,
        h,
        w: wd,
        o,
        kh,
        kw,
        stride,
        pad_top,
        pad_left,
        oh,
        ow,
        has_bias: bias.is_some(),
    })
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let ohw = g.out_hw();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let ohw = g.out_hw();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward_kernel<T: Element>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let in_len = g.c * g.h * g.w;
    let ohw = g.out_hw();
    let mut out = vec![T::zero(); g.n * g.o * ohw];
    par::for_each_chunk_mut(&mut out, g.o * ohw, |n, out_n| {
        let xn = &x[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(false, false, g.o, ohw, g.c, w, xn, out_n, false);
        } else {
            let mut cols = vec![T::zero(); g.col_rows() * ohw];
            im2col(g, xn, &mut cols);
            gemm(false, false, g.o, ohw, g.col_rows(), w, &cols, out_n, false);
        }
        if let Some(b) = bias {
            for (oc, plane) in out_n.chunks_mut(ohw).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[oc]);
            }
        }
    });
    out
}

/// 2-D convolution of an NCHW input with an OIHW kernel.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = geometry(x, w, bias, stride, padding)?;
    let out = forward_kernel(&g, x.data(), w.data(), bias.map(|b| b.data()));
    Ok(Tensor::from_parts(vec![g.n, g.o, g.oh, g.ow], out))
}

impl<T: Element> Graph<T> {
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let xv = self.check(x)?;
        let wv = self.check(w)?;
        let bv = bias.map(|b| self.check(b)).transpose()?;
        let g = geometry(xv, wv, bv, stride, padding)?;
        let out = forward_kernel(&g, xv.data(), wv.data(), bv.map(|b| b.data()));
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            Tensor::from_parts(vec![g.n, g.o, g.oh, g.ow], out),
            Op::Conv2d(g),
            inputs,
        )
    }
}

struct ChunkGrads<T> {
    dw: Option<Vec<T>>,
    db: Option<Vec<T>>,
    dx: Option<Vec<T>>,
}

pub(crate) fn backward<T: Element>(g: &ConvGeom, ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let x = ctx.inputs[0].data();
    let w = ctx.inputs[1].data();
    let dy = ctx.grad;
    let (need_x, need_w) = (ctx.need[0], ctx.need[1]);
    let need_b = g.has_bias && ctx.need[2];
    let in_len = g.c * g.h * g.w;
    let ohw = g.out_hw();
    let rows = g.col_rows();
    let chunks = g.n.div_ceil(GRAD_CHUNK);

    let partials: Vec<ChunkGrads<T>> = par::map_range(chunks, |ci| {
        let lo = ci * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(g.n);
        let mut dw = need_w.then(|| vec![T::zero(); g.o * rows]);
        let mut db = need_b.then(|| vec![T::zero(); g.o]);
        let mut dx = need_x.then(|| vec![T::zero(); (hi - lo) * in_len]);
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * ohw }];
        for n in lo..hi {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let dyn_ = &dy[n * g.o * ohw..(n + 1) * g.o * ohw];
            if let Some(dw) = dw.as_mut() {
                if g.is_pointwise() {
                    gemm(false, true, g.o, rows, ohw, dyn_, xn, dw, true);
                } else {
                    im2col(g, xn, &mut cols);
                    gemm(false, true, g.o, rows, ohw, dyn_, &cols, dw, true);
                }
            }
            if let Some(db) = db.as_mut() {
                for (oc, plane) in dyn_.chunks(ohw).enumerate() {
                    db[oc] += plane.iter().copied().sum::<T>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[(n - lo) * in_len..(n - lo + 1) * in_len];
                if g.is_pointwise() {
                    gemm(true, false, rows, ohw, g.o, w, dyn_, dxn, false);
                } else {
                    let mut dcols = vec![T::zero(); rows * ohw];
                    gemm(true, false, rows, ohw, g.o, w, dyn_, &mut dcols, false);
                    col2im(g, &dcols, dxn);
                }
            }
        }
        ChunkGrads { dw, db, dx }
    });

    let mut dw = need_w.then(|| vec![T::zero(); g.o * rows]);
    let mut db = need_b.then(|| vec![T::zero(); g.o]);
    let mut dx = need_x.then(|| Vec::with_capacity(g.n * in_len));
    for p in partials {
        if let (Some(acc), Some(part)) = (dw.as_mut(), p.dw) {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        if let (Some(acc), Some(part)) = (db.as_mut(), p.db) {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        if let (Some(acc), Some(part)) = (dx.as_mut(), p.dx) {
            acc.extend(part);
        }
    }
    let mut out = vec![dx, dw];
    if g.has_bias {
        out.push(db);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_halves_with_stride_two() {
        let x = Tensor::<f32>::zeros([1, 3, 224, 224]);
        let w = Tensor::<f32>::zeros([32, 3, 3, 3]);
        let y = conv2d(&x, &w, None, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 32, 112, 112]);
    }

    #[test]
    fn valid_padding_shape() {
        let x = Tensor::<f32>::zeros([2, 1, 7, 9]);
        let w = Tensor::<f32>::zeros([4, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 2, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 4]);
    }

    #[test]
    fn zero_input_yields_bias() {
        let x = Tensor::<f64>::zeros([1, 2, 5, 5]);
        let w = Tensor::<f64>::full([3, 2, 3, 3], 0.7);
        let b = Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, Padding::Same).unwrap();
        for (oc, plane) in y.data().chunks(25).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[oc]));
        }
    }

    #[test]
    fn contract_errors() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros([2, 2, 3, 3]);
        assert!(conv2d(&x, &w, None, 1, Padding::Same).is_err());
        let w = Tensor::<f32>::zeros([2, 3, 3, 3]);
        assert!(conv2d(&x, &w, None, 0, Padding::Same).is_err());
        let w = Tensor::<f32>::zeros([2, 3, 5, 5]);
        assert!(conv2d(&x, &w, None, 1, Padding::Valid).is_err());
        assert!(conv2d(&x, &w, None, 1, Padding::Same).is_ok());
    }

    #[test]
    fn rectangular_kernels_keep_same_shape() {
        let x = Tensor::<f32>::zeros([1, 2, 6, 7]);
        let w = Tensor::<f32>::zeros([2, 2, 1, 5]);
        assert_eq!(conv2d(&x, &w, None, 1, Padding::Same).unwrap().shape(), &[1, 2, 6, 7]);
        let w = Tensor::<f32>::zeros([2, 2, 5, 1]);
        assert_eq!(conv2d(&x, &w, None, 1, Padding::Same).unwrap().shape(), &[1, 2, 6, 7]);
    }
}
