//! Column-partitioned modified Gram-Schmidt QR decomposition.
//!
//! Each node holds a contiguous block of the matrix columns. The node
//! owning global column 0 finalizes it (norm into `R₀₀`, divide, broadcast)
//! and every node applies the broadcast column to its own not-yet-final
//! columns. When the finalized column is the last one before a node's
//! block, that node assumes control and finalizes its own columns in
//! global order, one broadcast per column, until its block is exhausted.
//! Exactly `n` column broadcasts decompose an `m x n` matrix.
//!
//! The arithmetic sequence applied to any column is identical to the
//! centralized modified Gram-Schmidt loop in [`qr_centralized`]; only the
//! message boundaries move with the partition, so the assembled factors
//! are bit-for-bit partition-invariant.

use thiserror::Error;

use crate::linalg::{dot_slices, l2_norm_slice, ColumnPartition, Matrix};

/// Relative scale for declaring a pivot column zero/deficient.
pub const PIVOT_REL_TOL: f64 = 1e-12;

/// Unit-norm check applied to received columns.
const UNIT_NORM_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QrError {
    /// Pivot norm at or below tolerance. For column 0 this signals the
    /// "all zeros in the first column data" fault; the calibration round
    /// must abort and retry later.
    #[error("column {col} has zero norm within tolerance (norm {norm:.3e})")]
    ZeroColumn { col: usize, norm: f64 },
    #[error("received column {got} but expected column {expected}")]
    OutOfOrderColumn { expected: usize, got: usize },
    #[error("received column {col} is not unit-norm (norm {norm})")]
    NotUnitNorm { col: usize, norm: f64 },
    #[error("received column {col} has length {got}, expected {expected}")]
    ColumnLength {
        col: usize,
        expected: usize,
        got: usize,
    },
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("matrix must be tall: {rows} rows < {cols} cols")]
    NotTall { rows: usize, cols: usize },
    #[error("node does not own column 0")]
    NotController,
    #[error("decomposition already finished")]
    Finished,
}

/// A finalized, unit-norm Q column to broadcast to the other nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct QColumn {
    pub col: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QrPhase {
    Idle,
    Updating,
    Controlling,
    Done,
}

/// Per-node state of the distributed QR decomposition.
///
/// The node stores its block of Q columns (initialized from A) and, for
/// each of its own columns `k`, the R entries `R[i][k]` it computes while
/// applying updates — i.e. the R columns aligned with its Q columns.
#[derive(Debug, Clone)]
pub struct QrState {
    owned: std::ops::Range<usize>,
    total_cols: usize,
    rows: usize,
    /// Local Q columns, in place of the original A columns.
    q_cols: Vec<Vec<f64>>,
    /// R column per owned Q column, length `total_cols`.
    r_cols: Vec<Vec<f64>>,
    /// Global index of the next column to be finalized.
    next_col: usize,
    /// Count of this node's columns already finalized.
    finalized: usize,
    phase: QrPhase,
    pivot_tol: f64,
    flops: u64,
}

impl QrState {
    /// `block` holds the node's columns of A; `owned` gives their global
    /// indices within a matrix of `total_cols` columns. `pivot_tol` is an
    /// absolute threshold, typically [`PIVOT_REL_TOL`] times the Frobenius
    /// norm of the full matrix (or of the local block when the global
    /// norm is not known at the node).
    pub fn new(
        block: &Matrix,
        owned: std::ops::Range<usize>,
        total_cols: usize,
        pivot_tol: f64,
    ) -> Self {
        assert_eq!(block.cols(), owned.len(), "block width must match range");
        assert!(owned.end <= total_cols);
        let q_cols: Vec<Vec<f64>> = (0..block.cols()).map(|j| block.column(j)).collect();
        let r_cols = vec![vec![0.0; total_cols]; block.cols()];
        Self {
            owned,
            total_cols,
            rows: block.rows(),
            q_cols,
            r_cols,
            next_col: 0,
            finalized: 0,
            phase: QrPhase::Idle,
            pivot_tol,
            flops: 0,
        }
    }

    /// Convenience for the common scale-relative tolerance.
    pub fn pivot_tol_for(block_or_full: &Matrix) -> f64 {
        PIVOT_REL_TOL * block_or_full.frobenius_norm()
    }

    pub fn phase(&self) -> QrPhase {
        self.phase
    }

    pub fn finished(&self) -> bool {
        self.phase == QrPhase::Done
    }

    pub fn owned(&self) -> std::ops::Range<usize> {
        self.owned.clone()
    }

    /// Global index of the next column this node expects to see
    /// finalized (its own or another node's).
    pub fn next_col(&self) -> usize {
        self.next_col
    }

    /// Multiply-accumulate operations performed so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// The node's finalized Q columns (valid once finished).
    pub fn q_block(&self) -> &[Vec<f64>] {
        &self.q_cols
    }

    /// The node's R columns, each of length `total_cols` (valid once
    /// finished; entries below the diagonal are zero).
    pub fn r_block(&self) -> &[Vec<f64>] {
        &self.r_cols
    }

    /// Entry point for the node owning column 0. Finalizes column 0 and
    /// any further local columns it controls, returning one broadcast
    /// payload per finalized column.
    pub fn start(&mut self) -> Result<Vec<QColumn>, QrError> {
        if self.owned.start != 0 {
            return Err(QrError::NotController);
        }
        if self.phase != QrPhase::Idle {
            return Err(QrError::Finished);
        }
        self.finalize_run()
    }

    /// Handles a broadcast Q column from another node. Applies the update
    /// to every locally owned not-yet-final column, then — if control has
    /// reached this node's block — finalizes local columns in order and
    /// returns their broadcast payloads.
    pub fn receive_column(&mut self, col: usize, values: &[f64]) -> Result<Vec<QColumn>, QrError> {
        if self.phase == QrPhase::Done {
            return Err(QrError::Finished);
        }
        if col != self.next_col {
            return Err(QrError::OutOfOrderColumn {
                expected: self.next_col,
                got: col,
            });
        }
        if self.owned.contains(&col) {
            // own broadcasts are applied locally, never received
            return Err(QrError::OutOfOrderColumn {
                expected: self.next_col,
                got: col,
            });
        }
        if values.len() != self.rows {
            return Err(QrError::ColumnLength {
                col,
                expected: self.rows,
                got: values.len(),
            });
        }
        let norm = l2_norm_slice(values);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(QrError::NotUnitNorm { col, norm });
        }

        self.apply_update(col, values);
        self.next_col += 1;
        self.finalize_run()
    }

    /// Projects the finalized column `col` out of every local column that
    /// is not yet final, recording the R entries.
    fn apply_update(&mut self, col: usize, q_i: &[f64]) {
        for local in self.finalized..self.q_cols.len() {
            let q_k = &mut self.q_cols[local];
            let r_ik = dot_slices(q_i, q_k);
            for (qk, qi) in q_k.iter_mut().zip(q_i) {
                *qk -= r_ik * qi;
            }
            self.r_cols[local][col] = r_ik;
            self.flops += 2 * self.rows as u64;
        }
    }

    /// Finalizes local columns while control sits at this node: norm into
    /// the diagonal R entry, divide, emit broadcast, and apply the fresh
    /// column to the remaining local ones.
    fn finalize_run(&mut self) -> Result<Vec<QColumn>, QrError> {
        let mut out = Vec::new();
        while self.owned.contains(&self.next_col) {
            let local = self.next_col - self.owned.start;
            debug_assert_eq!(local, self.finalized);
            let norm = l2_norm_slice(&self.q_cols[local]);
            self.flops += self.rows as u64 + 1;
            if norm <= self.pivot_tol {
                self.phase = QrPhase::Idle; // round aborts; retry re-creates the state
                return Err(QrError::ZeroColumn {
                    col: self.next_col,
                    norm,
                });
            }
            self.phase = QrPhase::Controlling;
            self.r_cols[local][self.next_col] = norm;
            for v in &mut self.q_cols[local] {
                *v /= norm;
            }
            self.flops += self.rows as u64;
            let finalized_col = self.q_cols[local].clone();
            out.push(QColumn {
                col: self.next_col,
                values: finalized_col.clone(),
            });
            self.finalized += 1;
            self.next_col += 1;
            self.apply_update(self.next_col - 1, &finalized_col);
        }
        self.phase = if self.next_col == self.total_cols {
            QrPhase::Done
        } else {
            QrPhase::Updating // keep consuming broadcasts until all columns seen
        };
        Ok(out)
    }
}

/// Centralized modified Gram-Schmidt oracle. Returns `(Q, R)` with
/// orthonormal Q columns and upper-triangular R with positive diagonal.
pub fn qr_centralized(a: &Matrix) -> Result<(Matrix, Matrix), QrError> {
    if a.rows() < a.cols() {
        return Err(QrError::NotTall {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.cols();
    let tol = PIVOT_REL_TOL * a.frobenius_norm();
    let mut q: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        let norm = l2_norm_slice(&q[i]);
        if norm <= tol {
            return Err(QrError::RankDeficient(format!(
                "pivot column {i} has norm {norm:.3e} <= tolerance {tol:.3e}"
            )));
        }
        r.set(i, i, norm);
        for v in &mut q[i] {
            *v /= norm;
        }
        let (head, tail) = q.split_at_mut(i + 1);
        let q_i = &head[i];
        for (offset, q_k) in tail.iter_mut().enumerate() {
            let k = i + 1 + offset;
            let r_ik = dot_slices(q_i, q_k);
            r.set(i, k, r_ik);
            for (qk, qi) in q_k.iter_mut().zip(q_i) {
                *qk -= r_ik * qi;
            }
        }
    }
    Ok((Matrix::from_columns(&q).expect("non-empty"), r))
}

/// Outcome of an in-process distributed run: assembled factors plus the
/// per-run accounting used by the communication analysis.
#[derive(Debug, Clone)]
pub struct PartitionedQr {
    pub q: Matrix,
    pub r: Matrix,
    /// One broadcast per column; always `n` for an `m x n` matrix.
    pub broadcasts: usize,
    pub flops: u64,
}

/// Runs the distributed decomposition in process with lockstep delivery:
/// every broadcast is applied to all other nodes in ascending node order
/// before the next one is processed. Faults and latency live in `simnet`;
/// this driver is the reference path for tests and centralized callers.
pub fn qr_partitioned(a: &Matrix, partition: &ColumnPartition) -> Result<PartitionedQr, QrError> {
    assert_eq!(
        partition.total_cols(),
        a.cols(),
        "partition must cover the matrix columns"
    );
    if a.rows() < a.cols() {
        return Err(QrError::NotTall {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let tol = PIVOT_REL_TOL * a.frobenius_norm();
    let mut states: Vec<QrState> = (0..partition.nodes())
        .map(|k| {
            let block = partition.block(k);
            QrState::new(&a.column_block(block.clone()), block, a.cols(), tol)
        })
        .collect();

    let mut queue: std::collections::VecDeque<QColumn> = states[0].start()?.into();
    let mut broadcasts = 0;
    while let Some(msg) = queue.pop_front() {
        broadcasts += 1;
        for (k, state) in states.iter_mut().enumerate() {
            if state.owned().contains(&msg.col) {
                continue; // the sender already applied its own column
            }
            let produced = state.receive_column(msg.col, &msg.values)?;
            debug_assert!(
                produced.is_empty() || partition.block(k).contains(&produced[0].col)
            );
            queue.extend(produced);
        }
    }
    debug_assert!(states.iter().all(|s| s.finished()));

    let mut q_cols: Vec<Vec<f64>> = Vec::with_capacity(a.cols());
    let mut r = Matrix::zeros(a.cols(), a.cols());
    for (k, state) in states.iter().enumerate() {
        for (local, global) in partition.block(k).enumerate() {
            q_cols.push(state.q_block()[local].clone());
            for i in 0..a.cols() {
                r.set(i, global, state.r_block()[local][i]);
            }
        }
    }
    let flops = states.iter().map(|s| s.flops()).sum();
    Ok(PartitionedQr {
        q: Matrix::from_columns(&q_cols).expect("non-empty"),
        r,
        broadcasts,
        flops,
    })
}
