//! Dense row-major tensors.
//!
//! A [`Tensor`] owns a validated [`Shape`] and a flat buffer whose length is
//! the product of the shape. Every public constructor and operation rejects
//! non-finite results, so a `Tensor` in hand never holds NaN or infinity.
//! Flat (row-major) positions are the canonical index space used by the
//! sparsifier and the DP step.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A non-empty list of positive dimensions.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("shape must have at least one dimension"));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!(
                "dimension {pos} of {dims:?} is zero"
            )));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Shape::new(v)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} entries, got {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        Tensor { shape, data }.checked("Tensor::new")
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        Self::new(Shape::new(dims)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Shape, value: T) -> Result<Self> {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![value; n],
        }
        .checked("Tensor::full")
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Builds a tensor from kernel output without re-validating finiteness.
    pub(crate) fn from_parts_unchecked(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::from_parts_unchecked(self.shape.clone(), data).checked("add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor::from_parts_unchecked(self.shape.clone(), data).checked("sub")
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        let data = self.data.iter().map(|&a| a * factor).collect();
        Tensor::from_parts_unchecked(self.shape.clone(), data).checked("scale")
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (a, b) = (self.dims(), other.dims());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape(format!("matmul: {a:?} x {b:?}")));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = self.data[i * k + p];
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Tensor::from_parts_unchecked(Shape(vec![m, n]), out).checked("matmul")
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Euclidean norm of the entries at the given flat positions.
    pub fn l2_norm_at(&self, indices: &[usize]) -> Result<T> {
        let mut acc = T::zero();
        for &i in indices {
            let v = *self.data.get(i).ok_or(Error::Index {
                index: i,
                len: self.data.len(),
            })?;
            acc += v * v;
        }
        Ok(acc.sqrt())
    }
}
