//! Dense row-major tensor over f32/f64.
//!
//! The container is deliberately thin: shape plus a flat buffer. Matrix
//! products delegate to ndarray's GEMM kernel; everything else is explicit
//! loops. Networks in this crate only ever need rank-1 and rank-2 tensors.

use std::fmt;

use ndarray::{Array2, ArrayView2, LinalgScalar};
use num_traits::Float;

use crate::error::{Error, Result};

/// Element type for all network math: f32 in the shipped engine, f64 where
/// tests need well-conditioned derivatives of the same code.
pub trait Scalar:
    Float + LinalgScalar + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from f64 (rounds for f32).
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that the buffer length matches the shape
    /// and that every dimension is positive.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "buffer length {} does not match shape {shape:?} (expected {expected})",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("cannot build a tensor from zero rows".into()));
        }
        let width = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {width}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), width], data)
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

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!(
                "expected a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let (r, c) = self.dims2().expect("row() on non-matrix");
        assert!(i < r, "row {i} out of bounds for {r} rows");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let (r, c) = self.dims2().expect("row_mut() on non-matrix");
        assert!(i < r, "row {i} out of bounds for {r} rows");
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise add of shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Converts elementwise through f64 into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    fn view2(&self) -> ArrayView2<'_, T> {
        let (r, c) = self.dims2().expect("matmul operand must be rank-2");
        ArrayView2::from_shape((r, c), &self.data).expect("shape/buffer mismatch")
    }

    /// `self (n×k) · other (n? no: k×m) → n×m`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = self.dims2()?;
        let (k2, m) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: ({n}x{k}) · ({k2}x{m})"
            )));
        }
        let out = self.view2().dot(&other.view2());
        Tensor::new(vec![n, m], row_major_data(out))
    }

    /// `self (n×k) · otherᵀ (m×k) → n×m`. Matches the dense-layer layout
    /// where weights are stored as (out_dim, in_dim).
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = self.dims2()?;
        let (m, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt inner dimensions differ: ({n}x{k}) · ({m}x{k2})ᵀ"
            )));
        }
        let out = self.view2().dot(&other.view2().t());
        Tensor::new(vec![n, m], row_major_data(out))
    }

    /// `selfᵀ (k×n) · other (n→ rows must match) → k×m`. Used for weight
    /// gradients: dW = dyᵀ · x.
    pub fn matmul_tn(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = self.dims2()?;
        let (n2, m) = other.dims2()?;
        if n != n2 {
            return Err(Error::Shape(format!(
                "matmul_tn row counts differ: ({n}x{k})ᵀ · ({n2}x{m})"
            )));
        }
        let out = self.view2().t().dot(&other.view2());
        Tensor::new(vec![k, m], row_major_data(out))
    }
}

/// Extracts a GEMM result in logical row-major order. ndarray may hand back
/// the product in column-major memory layout (it computes the transposed
/// product when operand strides favour it, e.g. with a 1-wide operand view),
/// so the raw buffer cannot be trusted as-is.
fn row_major_data<T: Scalar>(out: Array2<T>) -> Vec<T> {
    if out.is_standard_layout() {
        let (data, offset) = out.into_raw_vec_and_offset();
        debug_assert_eq!(offset, Some(0));
        data
    } else {
        out.iter().copied().collect()
    }
}
