//! Reverse-mode automatic differentiation over dense real tensors.
//!
//! Small by design: dense affine layers, batch normalization, ReLU, pooling,
//! concatenation, the elementwise/reduction zoo needed by the rate loss, a
//! stop-gradient, and Adam. Graphs are built define-by-run on a [`Tape`];
//! every op validates shapes and finiteness as it executes.

mod adam;
mod check;
mod tape;

pub use adam::AdamState;
pub use check::check_gradient;
pub use tape::{BatchStats, Gradients, Op, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {context}")]
    ShapeMismatch { context: String },
    #[error("non-finite values produced by {context}")]
    NonFinite { context: String },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
}

/// Dense row-major f64 tensor. Matrices carry shape [rows, cols]; scalars
/// carry shape [1]; bias vectors carry shape [n].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Tensor {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Tensor { shape: vec![r, c], data: rows.concat() }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a matrix ([r, c]); 1 for any other rank.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a matrix ([r, c]); total length for 1-D shapes.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            self.data.len()
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_constructors_and_accessors() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(t.shape, vec![2, 2]);
        assert_eq!(t.at2(1, 0), 3.0);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 2);
        let s = Tensor::scalar(5.0);
        assert!(s.is_scalar());
        assert_eq!(s.shape, vec![1]);
        let z = Tensor::zeros(&[3, 4]);
        assert_eq!(z.numel(), 12);
        assert!(z.all_finite());
        let bad = Tensor::from_vec(&[2], vec![f64::NAN, 1.0]);
        assert!(!bad.all_finite());
    }
}
