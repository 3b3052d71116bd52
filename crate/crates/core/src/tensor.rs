//! Dense containers and versioned parameter snapshots.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("shape mismatch: {rows}x{cols} needs {expected} elements, got {got}")]
    Shape {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
}

/// Contiguous vector of scalars.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector<S> {
    data: Vec<S>,
}

impl<S: Scalar> Vector<S> {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![S::zero(); len],
        }
    }

    pub fn filled(len: usize, value: S) -> Self {
        Self {
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        Self { data }
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Index and value of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<(usize, S)> {
        first_non_finite(&self.data)
    }

    pub fn cast<T: Scalar>(&self) -> Vector<T> {
        Vector {
            data: self.data.iter().map(|x| T::lit(x.widen())).collect(),
        }
    }
}

impl<S> Deref for Vector<S> {
    type Target = [S];

    fn deref(&self) -> &[S] {
        &self.data
    }
}

impl<S> DerefMut for Vector<S> {
    fn deref_mut(&mut self) -> &mut [S] {
        &mut self.data
    }
}

impl<S> From<Vec<S>> for Vector<S> {
    fn from(data: Vec<S>) -> Self {
        Self { data }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    data: Vec<S>,
    rows: usize,
    cols: usize,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![S::zero(); rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape {
                rows,
                cols,
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { data, rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: S) {
        self.data[r * self.cols + c] = value;
    }

    /// `out = self · x + bias`, accumulated in 64 bits.
    pub fn affine(&self, x: &[S], bias: &[S], out: &mut [S]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(bias.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            *o = S::lit(crate::scalar::dot(self.row(r), x) + bias[r].widen());
        }
    }

    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            data: self.data.iter().map(|x| T::lit(x.widen())).collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

pub(crate) fn first_non_finite<S: Scalar>(data: &[S]) -> Option<(usize, S)> {
    data.iter()
        .copied()
        .enumerate()
        .find(|(_, x)| !x.is_finite())
}

/// Immutable, versioned flat parameter vector.
///
/// The version is the trainer's optimizer step count; it starts at 0 for the
/// initial parameters. Cloning shares the underlying buffer.
#[derive(Debug, Clone)]
pub struct Snapshot<S> {
    version: u64,
    params: Arc<[S]>,
}

impl<S: Scalar> Snapshot<S> {
    /// Deep-copies `params` into a new snapshot.
    pub fn new(params: &[S], version: u64) -> Result<Self, TensorError> {
        if let Some((index, value)) = first_non_finite(params) {
            return Err(TensorError::NonFinite {
                index,
                value: value.widen(),
            });
        }
        Ok(Self {
            version,
            params: Arc::from(params),
        })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// True when both snapshots share one buffer.
    pub fn same_buffer(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.params, &other.params)
    }

    /// Address of the parameter buffer; identity check for zero-copy paths.
    pub fn buffer_addr(&self) -> usize {
        self.params.as_ptr() as usize
    }

    /// Hash of the version and the exact bit patterns of every parameter.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        h.write_u64(self.version);
        for p in self.params.iter() {
            h.write_u64(p.widen().to_bits());
        }
        h.finish()
    }

    /// Bitwise equality of version and parameters.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|(a, b)| a.widen().to_bits() == b.widen().to_bits())
    }
}

/// Convenience constructor matching the flat-vector workflow.
pub fn snapshot_from_params<S: Scalar>(
    params: &Vector<S>,
    version: u64,
) -> Result<Snapshot<S>, TensorError> {
    Snapshot::new(params.as_slice(), version)
}
