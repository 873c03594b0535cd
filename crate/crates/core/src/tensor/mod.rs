//! Dense row-major `f32` tensors and the reverse-mode tape built on them.

pub mod ops;
mod tape;

pub use tape::{Gradients, ParamId, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense N-dimensional array of `f32`, row-major. Images are NCHW.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::shape("tensor", format!("dimension sizes must be >= 1, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose shape is known to be valid for `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        Ok(Self { shape, data: vec![value; numel] })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f32, rng: &mut R) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        let data = (0..numel)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("expected one element, shape is {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != self.numel() {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape)));
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(op, format!("expected rank-2, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape(op, format!("expected rank-4 NCHW, got {:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = self.shape[0];
        if start >= end || end > outer {
            return Err(Error::shape("slice_outer", format!("range {start}..{end} invalid for leading dim {outer}")));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self { shape, data: self.data[start * inner..end * inner].to_vec() })
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_outer(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("stack_outer of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut outer = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape("stack_outer", format!("{:?} vs {:?}", p.shape, first.shape)));
            }
            outer += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Self { shape, data })
    }
}

/// Dense row-major `i8` tensor holding INT8 quantized values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
}

impl QTensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<i8>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::shape(
                "qtensor",
                format!("shape {shape:?} needs {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}
