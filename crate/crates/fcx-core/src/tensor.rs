//! Minimal dense tensor: a shape and a flat row-major buffer.
//!
//! Layers index into the flat buffer directly; this type only guards the
//! shape/length contract and provides the bulk helpers the optimizer needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self, CoreError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "tensor shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn fill(&mut self, v: F) {
        for x in &mut self.data {
            *x = v;
        }
    }

    pub fn scale(&mut self, s: F) {
        for x in &mut self.data {
            *x = *x * s;
        }
    }

    /// Euclidean norm accumulated in f64 regardless of storage precision.
    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for x in &self.data {
            let v = x.as_f64();
            acc += v * v;
        }
        libm::sqrt(acc)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Same shape, every element converted through f64.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.as_f64())).collect(),
        }
    }
}
