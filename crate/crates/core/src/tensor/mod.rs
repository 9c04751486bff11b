//! Dense tensors, the recorded computation graph and reverse-mode gradients.

mod element;
pub mod gradcheck;
mod graph;
pub mod ops;

pub use element::{DType, Element};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, NodeId};
pub use ops::batchnorm::{BatchMoments, BnStats};
pub use ops::conv::{conv2d, Padding};
pub use ops::pool::{pool2d, PoolKind};
pub use ops::reduce::ReduceKind;
pub use ops::softmax::softmax_rows;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense row-major N-dimensional array.
///
/// An empty shape denotes a scalar holding one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels that have already sized `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element as `f64`; intended for scalar tensors.
    pub fn item(&self) -> f64 {
        self.data[0].as_f64()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Shape as `(n, c, h, w)`; errors unless the tensor is 4-D.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(
                op,
                format!("expected NCHW tensor, got shape {:?}", self.shape),
            )),
        }
    }

    /// Shape as `(rows, cols)`; errors unless the tensor is 2-D.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(
                op,
                format!("expected 2-D tensor, got shape {:?}", self.shape),
            )),
        }
    }

    /// Split along axis 1 into consecutive pieces of the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
        if self.ndim() < 2 || widths.iter().sum::<usize>() != self.shape[1] {
            return Err(Error::invalid(
                "split_channels",
                format!("widths {widths:?} do not partition axis 1 of {:?}", self.shape),
            ));
        }
        let outer = self.shape[0];
        let inner: usize = self.shape[2..].iter().product();
        let total = self.shape[1];
        let mut offset = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            let mut shape = self.shape.clone();
            shape[1] = w;
            let mut data = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                data.extend_from_slice(&self.data[start..start + w * inner]);
            }
            out.push(Tensor::new(shape, data)?);
            offset += w;
        }
        Ok(out)
    }

    /// Index of the largest element of each row of a 2-D tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (n, k) = self.dims2("argmax_rows")?;
        Ok((0..n)
            .map(|i| {
                let row = &self.data[i * k..(i + 1) * k];
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let k = self.shape[self.shape.len() - 1];
        &self.data[i * k..(i + 1) * k]
    }

    /// Sample `i` of a batched tensor, keeping the leading axis at length one.
    pub fn sample(&self, i: usize) -> Tensor<T> {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_parts(shape, self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Concatenate tensors along the leading (batch) axis.
    pub fn concat_batch(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("concat_batch", "no tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut lead = 0;
        for t in items {
            if t.ndim() == 0 || t.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_batch",
                    expected: first.shape.clone(),
                    got: t.shape.clone(),
                });
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
        let t = Tensor::<f32>::new([2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.dtype(), DType::F32);
    }

    #[test]
    fn scalar_has_one_element() {
        let s = Tensor::<f64>::scalar(3.0);
        assert!(s.shape().is_empty());
        assert_eq!(s.item(), 3.0);
    }

    #[test]
    fn split_channels_partitions_axis_one() {
        let t = Tensor::<f32>::new([2, 3, 1, 1], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let parts = t.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0].data(), &[0., 3.]);
        assert_eq!(parts[1].data(), &[1., 2., 4., 5.]);
        assert!(t.split_channels(&[1, 1]).is_err());
    }

    #[test]
    fn non_finite_is_detectable() {
        let t = Tensor::<f32>::new([2], vec![1.0, f32::NAN]).unwrap();
        assert!(!t.is_finite());
    }
}
