use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::layout::ParamLayout;

/// A flat vector shaped like the model parameters (a gradient, an update,
/// or a sum of clipped gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec<T: Scalar> {
    layout: Arc<ParamLayout>,
    data: Vec<T>,
}

impl<T: Scalar> ParamVec<T> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![T::zero(); layout.total()];
        ParamVec { layout, data }
    }

    pub fn from_vec(layout: Arc<ParamLayout>, data: Vec<T>) -> Result<Self> {
        if data.len() != layout.total() {
            return Err(Error::shape(format!(
                "parameter vector has {} entries, layout needs {}",
                data.len(),
                layout.total()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ParamVec::from_vec"));
        }
        Ok(ParamVec { layout, data })
    }

    /// One tensor per parameter, in layout order.
    pub fn from_tensors(layout: Arc<ParamLayout>, tensors: &[Tensor<T>]) -> Result<Self> {
        if tensors.len() != layout.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut data = Vec::with_capacity(layout.total());
        for (info, t) in layout.entries().iter().zip(tensors) {
            if t.shape() != &info.shape {
                return Err(Error::shape(format!(
                    "{}: expected {:?}, got {:?}",
                    info.name,
                    info.shape,
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        Ok(ParamVec { layout, data })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn param(&self, i: usize) -> &[T] {
        &self.data[self.layout.entries()[i].range()]
    }

    pub fn tensor(&self, i: usize) -> Tensor<T> {
        let info = &self.layout.entries()[i];
        Tensor::from_parts_unchecked(info.shape.clone(), self.data[info.range()].to_vec())
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn neg(&self) -> Self {
        ParamVec {
            layout: self.layout.clone(),
            data: self.data.iter().map(|&v| -v).collect(),
        }
    }
}

/// Exact per-sample gradients for a batch, one flat row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGrads<T: Scalar> {
    layout: Arc<ParamLayout>,
    batch_size: usize,
    data: Vec<T>,
}

impl<T: Scalar> PerSampleGrads<T> {
    pub(crate) fn zeros(layout: Arc<ParamLayout>, batch_size: usize) -> Self {
        let data = vec![T::zero(); layout.total() * batch_size];
        PerSampleGrads {
            layout,
            batch_size,
            data,
        }
    }

    /// Builds from explicit per-sample rows (each of length `layout.total()`).
    pub fn from_rows(layout: Arc<ParamLayout>, rows: Vec<Vec<T>>) -> Result<Self> {
        let p = layout.total();
        let mut data = Vec::with_capacity(p * rows.len());
        for (b, r) in rows.iter().enumerate() {
            if r.len() != p {
                return Err(Error::shape(format!(
                    "sample {b} gradient has {} entries, layout needs {p}",
                    r.len()
                )));
            }
            if !r.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("PerSampleGrads::from_rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(PerSampleGrads {
            layout,
            batch_size: rows.len(),
            data,
        })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let p = self.layout.total();
        &self.data[b * p..(b + 1) * p]
    }

    pub(crate) fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let p = self.layout.total();
        &mut self.data[b * p..(b + 1) * p]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.layout.total().max(1)).take(self.batch_size)
    }

    /// Flat gradient of parameter `i` for sample `b`.
    pub fn sample_param(&self, b: usize, i: usize) -> &[T] {
        &self.sample(b)[self.layout.entries()[i].range()]
    }

    /// Gradient of parameter `i` for sample `b`.
    pub fn tensor(&self, b: usize, i: usize) -> Tensor<T> {
        let info = &self.layout.entries()[i];
        Tensor::from_parts_unchecked(info.shape.clone(), self.sample(b)[info.range()].to_vec())
    }
}
