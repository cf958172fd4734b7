//! Dense rank-0..4 float tensors and reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, row-major `f32` buffer with a shape. Values
//! are plain data; gradients come from recording operations on a [`Tape`]
//! and running [`Tape::backward`]. Reductions accumulate in `f64` so that
//! finite-difference gradient checks stay meaningful at `f32` storage.
//!
//! # Example
//!
//! ```
//! use episodica::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])?);
//! let squared = tape.mul(x, x)?;
//! let loss = tape.sum(squared);
//! let grads = tape.backward(loss)?;
//! // d/dx sum(x^2) = 2x
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0, 8.0]);
//! # Ok::<(), episodica::Error>(())
//! ```

mod eten;
mod tape;

pub use eten::{read_eten1, read_eten1_from, write_eten1, write_eten1_to};
pub use tape::{Gradients, Tape, Var};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Immutable dense tensor: shape plus a flat row-major `f32` buffer.
///
/// Cloning is cheap (the buffer is shared). Rank is at most 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::Shape(format!("rank {} exceeds 4", shape.len())));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product::<usize>().max(1);
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![0.0; n]) }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product::<usize>().max(1);
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![1.0; n]) }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("from_rows: empty row list".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("from_rows: ragged rows".into()));
        }
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), d], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert_eq!(self.rank(), 2);
        let d = self.shape[1];
        &self.data[i * d..(i + 1) * d]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data: Vec<f32> = self.data.iter().map(|&x| f(x)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Elementwise combine with an equally shaped tensor.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<f32> =
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    /// Sum of all entries, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub(crate) fn from_shape_data(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>().max(1), data.len());
        Tensor { shape, data: Arc::new(data) }
    }
}

/// Dense matrix product with f64 accumulation. Shapes `m x k` by `k x n`.
pub fn matmul_raw(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape(format!(
            "matmul expects 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0f64;
            for (l, &av) in arow.iter().enumerate() {
                acc += av as f64 * b.data[l * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    Ok(Tensor::from_shape_data(vec![m, n], out))
}

/// `a · bᵀ` for `m x d` by `n x d`, f64 accumulation.
pub fn matmul_nt_raw(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::Shape(format!(
            "matmul_nt expects m x d and n x d, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, d) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * d..(i + 1) * d];
        for j in 0..n {
            let brow = &b.data[j * d..(j + 1) * d];
            let mut acc = 0.0f64;
            for l in 0..d {
                acc += arow[l] as f64 * brow[l] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    Ok(Tensor::from_shape_data(vec![m, n], out))
}
