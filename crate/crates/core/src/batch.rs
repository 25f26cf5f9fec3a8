use crate::error::{OclError, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;

/// Labelled examples, one per row of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub x: DenseMatrix<T>,
    pub y: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(x: DenseMatrix<T>, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(OclError::shape(format!(
                "{} rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Self::new(self.x.vstack(&other.x)?, y)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn example(&self, i: usize) -> (&[T], usize) {
        (self.x.row(i), self.y[i])
    }
}
