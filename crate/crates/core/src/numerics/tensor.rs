//! Dense row-major tensor.

use rand::Rng;
use rand_distr::StandardNormal;

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Dense tensor: a shape and row-major data. Values are kept finite;
/// any operation that would produce NaN/Inf reports an error instead.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Build a tensor from raw data, validating length and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    /// Internal constructor for values already known finite.
    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); numel] }
    }

    pub fn filled(shape: &[usize], value: F) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "filled" });
        }
        let numel = shape.iter().product();
        Ok(Tensor { shape: shape.to_vec(), data: vec![value; numel] })
    }

    pub fn scalar(value: F) -> Result<Self> {
        Tensor::from_vec(vec![1], vec![value])
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::from_f64_c(z * std)
            })
            .collect();
        Tensor { shape: shape.to_vec(), data }
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

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[F] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn at2(&self, i: usize, j: usize) -> F {
        self.data[i * self.shape[1] + j]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        // One reduction instead of a per-element branch: any NaN/Inf
        // poisons the absolute sum, and finite data at this crate's scales
        // cannot overflow it.
        let probe = self.data.iter().fold(F::zero(), |acc, v| acc + v.abs());
        if probe.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Elementwise in-place accumulation; shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor<F>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, factor: F) {
        for v in self.data.iter_mut() {
            *v = *v * factor;
        }
    }

    /// Convert the scalar type, e.g. to run an f64 reference path.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        let data = self.data.iter().map(|v| G::from_f64_c(v.as_f64())).collect();
        Tensor { shape: self.shape.clone(), data }
    }
}
