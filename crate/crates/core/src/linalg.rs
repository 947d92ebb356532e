//! Dense real matrices and vectors, plus the column-partition layout that
//! the distributed algorithms operate on.
//!
//! Everything is `f64`, row-major, 0-indexed, and value-semantic. Inputs
//! are validated to be finite on construction; operations that could
//! produce non-finite values report an error instead of propagating
//! NaN/∞.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NodeId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinalgError {
    #[error("dimension mismatch: {context} ({left} vs {right})")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error("empty {0}: dimensions must be at least 1")]
    Empty(&'static str),
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {rows}x{cols} needs {expected} entries, got {got}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid column partition: {0}")]
    BadPartition(String),
}

/// Dense matrix, row-major storage, indexed `(row, col)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::Empty("matrix"));
        }
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch {
                rows,
                cols,
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be at least 1");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix whose columns are the given equal-length vectors.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self, LinalgError> {
        if cols.is_empty() || cols[0].is_empty() {
            return Err(LinalgError::Empty("matrix"));
        }
        let m = cols[0].len();
        for c in cols {
            if c.len() != m {
                return Err(LinalgError::DimensionMismatch {
                    context: "column lengths",
                    left: m,
                    right: c.len(),
                });
            }
        }
        let mut data = Vec::with_capacity(m * cols.len());
        for i in 0..m {
            for c in cols {
                data.push(c[i]);
            }
        }
        Self::new(m, cols.len(), data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Copies a contiguous range of columns into a new matrix.
    pub fn column_block(&self, cols: std::ops::Range<usize>) -> Matrix {
        assert!(cols.end <= self.cols && !cols.is_empty());
        let width = cols.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            for j in cols.clone() {
                data.push(self.get(i, j));
            }
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                context: "matmul inner dimensions",
                left: self.cols,
                right: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    let v = out.get(i, j) + aik * other.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        if let Some(i) = out.data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn mul_vector(&self, v: &Vector) -> Result<Vector, LinalgError> {
        if self.cols != v.len() {
            return Err(LinalgError::DimensionMismatch {
                context: "matrix-vector product",
                left: self.cols,
                right: v.len(),
            });
        }
        let out: Vec<f64> = (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v.as_slice())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Vector::new(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.elementwise(other, |a, b| a + b, "matrix add")
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.elementwise(other, |a, b| a - b, "matrix sub")
    }

    pub fn scale(&self, factor: f64) -> Result<Matrix, LinalgError> {
        let data: Vec<f64> = self.data.iter().map(|v| v * factor).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    fn elementwise(
        &self,
        other: &Matrix,
        f: impl Fn(f64, f64) -> f64,
        context: &'static str,
    ) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                context,
                left: self.rows * self.cols,
                right: other.rows * other.cols,
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Dense vector of finite reals, length at least 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.is_empty() {
            return Err(LinalgError::Empty("vector"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "vector length must be at least 1");
        Self {
            data: vec![0.0; len],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false // construction requires len >= 1
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: f64) {
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Vector) -> Result<f64, LinalgError> {
        if self.len() != other.len() {
            return Err(LinalgError::DimensionMismatch {
                context: "dot product",
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(dot_slices(&self.data, &other.data))
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm_slice(&self.data)
    }

    pub fn scale(&self, factor: f64) -> Result<Vector, LinalgError> {
        Vector::new(self.data.iter().map(|v| v * factor).collect())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector, LinalgError> {
        self.zip_with(other, |a, b| a + b, "vector add")
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector, LinalgError> {
        self.zip_with(other, |a, b| a - b, "vector sub")
    }

    fn zip_with(
        &self,
        other: &Vector,
        f: impl Fn(f64, f64) -> f64,
        context: &'static str,
    ) -> Result<Vector, LinalgError> {
        if self.len() != other.len() {
            return Err(LinalgError::DimensionMismatch {
                context,
                left: self.len(),
                right: other.len(),
            });
        }
        Vector::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        )
    }
}

/// Sequential left-to-right dot product. The distributed prediction sums
/// per-node partials in the same element order, so the degenerate
/// one-node case is bit-identical to this.
#[inline]
pub fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn l2_norm_slice(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Assignment of feature-matrix columns to nodes.
///
/// Node `k` owns a contiguous, non-empty run of global column indices;
/// runs are in node order and cover `0..total_cols` exactly once. This
/// matches the daisy-chain control order of the distributed QR, where
/// control passes to the next node after its block of columns is
/// finalized. Unequal block sizes are allowed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnPartition {
    /// `starts[k]` is the first global column owned by node `k`;
    /// a sentinel `total_cols` entry terminates the list.
    starts: Vec<usize>,
}

impl ColumnPartition {
    /// Partition from consecutive block sizes, one per node.
    pub fn from_block_sizes(sizes: &[usize]) -> Result<Self, LinalgError> {
        if sizes.is_empty() {
            return Err(LinalgError::BadPartition("no nodes".into()));
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(LinalgError::BadPartition(format!(
                "node {k} owns no columns"
            )));
        }
        let mut starts = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        for &s in sizes {
            starts.push(acc);
            acc += s;
        }
        starts.push(acc);
        Ok(Self { starts })
    }

    /// All columns on a single node; lets centralized oracles reuse the
    /// distributed code paths.
    pub fn single(total_cols: usize) -> Self {
        Self::from_block_sizes(&[total_cols]).expect("total_cols >= 1")
    }

    /// Splits `total_cols` across `nodes` as evenly as possible; earlier
    /// nodes take the remainder.
    pub fn even(total_cols: usize, nodes: usize) -> Result<Self, LinalgError> {
        if nodes == 0 || total_cols < nodes {
            return Err(LinalgError::BadPartition(format!(
                "cannot split {total_cols} columns across {nodes} nodes"
            )));
        }
        let base = total_cols / nodes;
        let extra = total_cols % nodes;
        let sizes: Vec<usize> = (0..nodes)
            .map(|k| base + usize::from(k < extra))
            .collect();
        Self::from_block_sizes(&sizes)
    }

    pub fn nodes(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn total_cols(&self) -> usize {
        *self.starts.last().unwrap()
    }

    /// Global column range owned by node `k`.
    pub fn block(&self, node: usize) -> std::ops::Range<usize> {
        self.starts[node]..self.starts[node + 1]
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        (0..self.nodes()).map(|k| self.block(k).len()).collect()
    }

    pub fn owner_of(&self, col: usize) -> NodeId {
        assert!(col < self.total_cols(), "column out of range");
        let k = match self.starts.binary_search(&col) {
            Ok(k) => k,
            Err(k) => k - 1,
        };
        k as NodeId
    }

    /// Per-column owner list, in global column order.
    pub fn owners(&self) -> Vec<NodeId> {
        (0..self.total_cols())
            .map(|c| self.owner_of(c))
            .collect()
    }
}
