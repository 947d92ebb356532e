//! Distributed least-squares calibration: QR across the node group, SVD
//! of the gathered triangular factor at the controlling node, and the
//! pseudoinverse combination of per-node `Qᵀb` contributions into the
//! coefficient vector. A centralized single-node path computes the same
//! algebra directly and serves as the comparison arm and in-crate oracle
//! for the distributed route.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distqr::{self, QrError, QrState};
use crate::jacobisvd::{self, SvdError, SvdResult, SvdStats};
use crate::linalg::{dot_slices, ColumnPartition, Matrix, Vector};

/// Singular values below this fraction of the largest are treated as
/// zero when inverting; the solve is then minimum-norm and flagged.
pub const SIGMA_REL_CUTOFF: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrateError {
    /// First matrix column is all zeros — no usable solar measurements.
    #[error("first column of the calibration matrix is all zeros")]
    ZeroFirstColumn,
    #[error("calibration matrix is rank deficient at column {col}")]
    RankDeficient { col: usize },
    #[error("Q column received out of order (expected {expected}, got {got})")]
    QOutOfOrder { expected: usize, got: usize },
    #[error("SVD failed: {0}")]
    Svd(#[from] SvdError),
    /// Computed coefficients are identically zero; callers must keep the
    /// previously active coefficients.
    #[error("calibration produced all-zero coefficients")]
    ZeroCoefficients,
    #[error("invalid calibration input: {0}")]
    BadInput(String),
    #[error("illegal round phase transition: {from:?} -> {to:?}")]
    BadTransition { from: RoundPhase, to: RoundPhase },
}

impl From<QrError> for CalibrateError {
    fn from(e: QrError) -> Self {
        match e {
            QrError::ZeroColumn { col: 0, .. } => CalibrateError::ZeroFirstColumn,
            QrError::ZeroColumn { col, .. } => CalibrateError::RankDeficient { col },
            QrError::RankDeficient(_) => CalibrateError::RankDeficient { col: 0 },
            QrError::OutOfOrderColumn { expected, got } => {
                CalibrateError::QOutOfOrder { expected, got }
            }
            other => CalibrateError::BadInput(other.to_string()),
        }
    }
}

/// Fitted MLR weights plus provenance. All-zero weight vectors are
/// rejected at construction: they signal the "coefficients all zero"
/// fault and must never become active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub weights: Vector,
    /// Day index the fit was computed at.
    pub fitted_at: usize,
    pub round_id: u64,
}

impl CoefficientVector {
    pub fn new(weights: Vector, fitted_at: usize, round_id: u64) -> Result<Self, CalibrateError> {
        if weights.as_slice().iter().all(|&w| w == 0.0) {
            return Err(CalibrateError::ZeroCoefficients);
        }
        Ok(Self {
            weights,
            fitted_at,
            round_id,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Round/day stamp carried onto the fitted coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundStamp {
    pub round_id: u64,
    pub fitted_at: usize,
}

/// Phases of one calibration round, mirroring the node control loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundPhase {
    Wait,
    Qr,
    Svd,
    Pinv,
    Distribute,
    Done,
    Failed,
}

/// Why a round failed. The five injectable fault kinds plus the generic
/// timeout for messages that never arrive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureReason {
    ZeroFirstColumn,
    QOutOfOrder,
    QMissing,
    RMissing,
    ZeroCoefficients,
    Timeout,
}

impl FailureReason {
    /// Specificity rank used when several nodes report different reasons
    /// for the same round; lower is more specific.
    pub fn precedence(self) -> u8 {
        match self {
            FailureReason::ZeroFirstColumn => 0,
            FailureReason::QOutOfOrder => 1,
            FailureReason::ZeroCoefficients => 2,
            FailureReason::QMissing => 3,
            FailureReason::RMissing => 4,
            FailureReason::Timeout => 5,
        }
    }
}

/// State of one calibration round. Transitions are only legal along
/// Wait -> Qr -> Svd -> Pinv -> Distribute -> Done, with any phase able
/// to jump to Failed. A failed round must leave every node's active
/// coefficients untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRound {
    pub round_id: u64,
    pub partition: ColumnPartition,
    pub phase: RoundPhase,
    pub failure_reason: Option<FailureReason>,
}

impl CalibrationRound {
    pub fn new(round_id: u64, partition: ColumnPartition) -> Self {
        Self {
            round_id,
            partition,
            phase: RoundPhase::Wait,
            failure_reason: None,
        }
    }

    pub fn advance(&mut self, to: RoundPhase) -> Result<(), CalibrateError> {
        use RoundPhase::*;
        let legal = matches!(
            (self.phase, to),
            (Wait, Qr) | (Qr, Svd) | (Svd, Pinv) | (Pinv, Distribute) | (Distribute, Done)
        );
        if !legal {
            return Err(CalibrateError::BadTransition {
                from: self.phase,
                to,
            });
        }
        self.phase = to;
        Ok(())
    }

    pub fn fail(&mut self, reason: FailureReason) {
        self.phase = RoundPhase::Failed;
        self.failure_reason = Some(reason);
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.phase, RoundPhase::Done | RoundPhase::Failed)
    }
}

/// Message classes counted per round at the controlling node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageTally {
    pub q_broadcasts: usize,
    pub r_transfers: usize,
    pub qtb_transfers: usize,
    pub coefficient_broadcasts: usize,
}

impl MessageTally {
    pub fn total(&self) -> usize {
        self.q_broadcasts + self.r_transfers + self.qtb_transfers + self.coefficient_broadcasts
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub coeffs: CoefficientVector,
    /// True when sigma-cutoff truncation produced a minimum-norm solution.
    pub truncated: bool,
    pub flops: u64,
    pub messages: MessageTally,
}

/// SVD of the triangular factor, padding odd dimensions with a zero row
/// and column as the block scheme requires and stripping the padded
/// dimension from the result.
pub fn svd_of_r(r: &Matrix) -> Result<(SvdResult, SvdStats), SvdError> {
    let n = r.rows();
    if n.is_multiple_of(2) {
        return jacobisvd::svd_jacobi_with_stats(r);
    }
    let (padded, stats) = jacobisvd::svd_jacobi_with_stats(&jacobisvd::pad_even(r))?;
    // The padded dimension contributes exactly one zero singular value,
    // sorted last; its U/V columns stay on the unit axis, so stripping
    // the last row/column of each factor recovers the unpadded result.
    let mut u = Matrix::zeros(n, n);
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            u.set(i, j, padded.u.get(i, j));
            v.set(i, j, padded.v.get(i, j));
        }
    }
    let sigma = Vector::new(padded.sigma.as_slice()[..n].to_vec()).expect("n >= 1");
    Ok((SvdResult { u, sigma, v }, stats))
}

/// Central-node combination: `x = V * diag(sigma)^+ * U^T * q`.
/// Returns the solution, whether cutoff truncation was applied, and the
/// operation count.
pub fn pseudo_inverse_times(
    u: &Matrix,
    sigma: &Vector,
    v: &Matrix,
    q: &Vector,
) -> (Vector, bool, u64) {
    let n = sigma.len();
    debug_assert_eq!(u.rows(), n);
    debug_assert_eq!(v.rows(), n);
    debug_assert_eq!(q.len(), n);
    let sigma_max = sigma.as_slice().iter().cloned().fold(0.0, f64::max);
    let cutoff = SIGMA_REL_CUTOFF * sigma_max;
    let mut truncated = false;
    let mut flops = 0u64;

    // V <- V * diag(sigma)^-1, zeroing directions at or below cutoff.
    let mut v_scaled = v.clone();
    for j in 0..n {
        let s = sigma.get(j);
        if s <= cutoff {
            truncated = true;
            for i in 0..n {
                v_scaled.set(i, j, 0.0);
            }
        } else {
            for i in 0..n {
                v_scaled.set(i, j, v.get(i, j) / s);
            }
            flops += n as u64;
        }
    }
    // T = V' * U^T, then x = T * q.
    let t = v_scaled
        .matmul(&u.transpose())
        .expect("square dims agree");
    flops += (n * n * n) as u64;
    let x = t.mul_vector(q).expect("length n");
    flops += (n * n) as u64;
    (x, truncated, flops)
}

/// One node's contribution to the combination step: the dot product of
/// each of its finalized Q columns with the full target vector.
pub fn node_qtb(q_cols: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    q_cols.iter().map(|col| dot_slices(col, b)).collect()
}

/// Combines the SVD factors with per-node Q blocks and the shared target
/// vector into the coefficient vector, exactly as the controlling node
/// does after gathering `Qᵀb` transfers.
pub fn pinv_combine(
    u: &Matrix,
    sigma: &Vector,
    v: &Matrix,
    partition: &ColumnPartition,
    q_blocks: &[Vec<Vec<f64>>],
    b: &Vector,
    stamp: RoundStamp,
) -> Result<Calibration, CalibrateError> {
    let n = sigma.len();
    if q_blocks.len() != partition.nodes() {
        return Err(CalibrateError::BadInput(format!(
            "{} Q blocks for {} nodes",
            q_blocks.len(),
            partition.nodes()
        )));
    }
    let mut q = vec![0.0; n];
    let mut flops = 0u64;
    for (k, block) in q_blocks.iter().enumerate() {
        let cols = partition.block(k);
        if block.len() != cols.len() {
            return Err(CalibrateError::BadInput(format!(
                "node {k} supplied {} Q columns, owns {}",
                block.len(),
                cols.len()
            )));
        }
        let contribution = node_qtb(block, b.as_slice());
        flops += (block.len() * b.len()) as u64;
        for (offset, global) in cols.enumerate() {
            q[global] = contribution[offset];
        }
    }
    let q = Vector::new(q).map_err(|e| CalibrateError::BadInput(e.to_string()))?;
    let (x, truncated, pinv_flops) = pseudo_inverse_times(u, sigma, v, &q);
    let coeffs = CoefficientVector::new(x, stamp.fitted_at, stamp.round_id)?;
    Ok(Calibration {
        coeffs,
        truncated,
        flops: flops + pinv_flops,
        messages: MessageTally::default(),
    })
}

/// Least-squares fit computed entirely on one node: centralized QR, SVD
/// of R, direct combination. The Table-1 "centralized" comparison arm
/// and the in-crate oracle for the distributed path.
pub fn calibrate_centralized(
    x: &Matrix,
    b: &Vector,
    stamp: RoundStamp,
) -> Result<Calibration, CalibrateError> {
    validate_system(x.rows(), x.cols(), b.len())?;
    let (q, r) = distqr::qr_centralized(x)?;
    // Same accounting as the per-node instrumentation: per column, a norm
    // (m + 1) and a scale (m), plus 2m per orthogonalization pair.
    let (m, n) = (x.rows() as u64, x.cols() as u64);
    let qr_flops = n * (2 * m + 1) + m * n * (n - 1);
    let (svd, svd_stats) = svd_of_r(&r)?;
    let qtb = node_qtb(&(0..x.cols()).map(|j| q.column(j)).collect::<Vec<_>>(), b.as_slice());
    let qtb_flops = m * n;
    let qv = Vector::new(qtb).map_err(|e| CalibrateError::BadInput(e.to_string()))?;
    let (weights, truncated, pinv_flops) = pseudo_inverse_times(&svd.u, &svd.sigma, &svd.v, &qv);
    let coeffs = CoefficientVector::new(weights, stamp.fitted_at, stamp.round_id)?;
    Ok(Calibration {
        coeffs,
        truncated,
        flops: qr_flops + svd_stats.flops + qtb_flops + pinv_flops,
        messages: MessageTally::default(),
    })
}

/// Runs the full distributed calibration in process with lockstep message
/// delivery: distributed QR over the partitioned blocks, R and `Qᵀb`
/// gathering at the controlling node, SVD, combination, and the final
/// coefficient broadcast. Message classes are tallied per the protocol;
/// latency, loss, and fault injection live in `simnet`.
pub fn calibrate_distributed(
    x_blocks: &[Matrix],
    b: &Vector,
    partition: &ColumnPartition,
    stamp: RoundStamp,
) -> Result<Calibration, CalibrateError> {
    if x_blocks.len() != partition.nodes() {
        return Err(CalibrateError::BadInput(format!(
            "{} blocks for {} nodes",
            x_blocks.len(),
            partition.nodes()
        )));
    }
    let rows = x_blocks[0].rows();
    for (k, block) in x_blocks.iter().enumerate() {
        if block.rows() != rows {
            return Err(CalibrateError::BadInput(format!(
                "node {k} block has {} rows, expected {rows}",
                block.rows()
            )));
        }
        if block.cols() != partition.block(k).len() {
            return Err(CalibrateError::BadInput(format!(
                "node {k} block has {} cols, owns {}",
                block.cols(),
                partition.block(k).len()
            )));
        }
    }
    let n = partition.total_cols();
    validate_system(rows, n, b.len())?;

    // Scale-relative pivot tolerance from the full matrix, as the
    // centralized oracle uses; keeps the two routes arithmetically
    // identical.
    let fro = x_blocks
        .iter()
        .map(|blk| {
            let f = blk.frobenius_norm();
            f * f
        })
        .sum::<f64>()
        .sqrt();
    let pivot_tol = distqr::PIVOT_REL_TOL * fro;

    let mut states: Vec<QrState> = (0..partition.nodes())
        .map(|k| QrState::new(&x_blocks[k], partition.block(k), n, pivot_tol))
        .collect();
    let mut tally = MessageTally::default();
    let mut queue: std::collections::VecDeque<distqr::QColumn> = states[0].start()?.into();
    while let Some(msg) = queue.pop_front() {
        tally.q_broadcasts += 1;
        for state in states.iter_mut() {
            if state.owned().contains(&msg.col) {
                continue;
            }
            queue.extend(state.receive_column(msg.col, &msg.values)?);
        }
    }
    debug_assert_eq!(tally.q_broadcasts, n);

    // Gather R columns at the controlling node.
    let mut r = Matrix::zeros(n, n);
    for (k, state) in states.iter().enumerate() {
        for (local, global) in partition.block(k).enumerate() {
            for i in 0..n {
                r.set(i, global, state.r_block()[local][i]);
            }
        }
    }
    tally.r_transfers = partition.nodes() - 1;

    let (svd, svd_stats) = svd_of_r(&r)?;

    // Per-node Q^T b contributions, gathered at the controlling node.
    let q_blocks: Vec<Vec<Vec<f64>>> = states.iter().map(|s| s.q_block().to_vec()).collect();
    tally.qtb_transfers = partition.nodes() - 1;
    let mut cal = pinv_combine(&svd.u, &svd.sigma, &svd.v, partition, &q_blocks, b, stamp)?;
    tally.coefficient_broadcasts = 1;

    cal.flops += states.iter().map(|s| s.flops()).sum::<u64>() + svd_stats.flops;
    cal.messages = tally;
    Ok(cal)
}

fn validate_system(rows: usize, cols: usize, b_len: usize) -> Result<(), CalibrateError> {
    if rows < cols {
        return Err(CalibrateError::BadInput(format!(
            "system must be tall: {rows} rows < {cols} cols"
        )));
    }
    if b_len != rows {
        return Err(CalibrateError::BadInput(format!(
            "target vector has {b_len} entries for {rows} rows"
        )));
    }
    Ok(())
}
