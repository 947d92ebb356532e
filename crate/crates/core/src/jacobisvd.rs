//! Singular value decomposition of a small square matrix by cyclic
//! two-sided Jacobi rotations.
//!
//! The mesh-parallel block scheme this derives from works on 2x2 blocks;
//! here the same rotation kernel runs sequentially in row-cyclic pair
//! order on one node, which is where the calibration pipeline performs
//! the SVD anyway. Each 2x2 step first symmetrizes the block with a left
//! rotation, then diagonalizes it with a symmetric Schur rotation whose
//! angle stays within (-pi/4, pi/4], the usual convergence-friendly
//! choice.

use thiserror::Error;

use crate::linalg::{Matrix, Vector};

/// Off-diagonal Frobenius norm must fall to this fraction of the input
/// Frobenius norm for convergence.
pub const OFF_DIAG_REL_TOL: f64 = 1e-12;

/// Sweeps allowed before giving up; far beyond typical convergence for
/// the n <= 64 matrices this sees.
pub const MAX_SWEEPS: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SvdError {
    #[error("input must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("no convergence after {sweeps} sweeps (off-diagonal norm {off_norm:.3e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
}

/// Decomposition `input = U * diag(sigma) * V^T` with orthogonal U, V and
/// non-negative singular values sorted descending.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vector,
    pub v: Matrix,
}

/// Sweep and operation accounting for the energy analysis.
#[derive(Debug, Clone, Copy, Default)]
pub struct SvdStats {
    pub sweeps: usize,
    pub flops: u64,
}

/// Pads an odd-dimension square matrix with a zero row and column so the
/// 2x2 block scheme sees an even dimension. The padded dimension
/// contributes exactly one zero singular value, which callers strip
/// before use.
pub fn pad_even(r: &Matrix) -> Matrix {
    assert_eq!(r.rows(), r.cols(), "pad_even expects a square matrix");
    assert!(r.rows() % 2 == 1, "pad_even expects an odd dimension");
    let n = r.rows();
    let mut out = Matrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, r.get(i, j));
        }
    }
    out
}

pub fn svd_jacobi(r: &Matrix) -> Result<SvdResult, SvdError> {
    svd_jacobi_with_stats(r).map(|(res, _)| res)
}

pub fn svd_jacobi_with_stats(r: &Matrix) -> Result<(SvdResult, SvdStats), SvdError> {
    if r.rows() != r.cols() {
        return Err(SvdError::NotSquare {
            rows: r.rows(),
            cols: r.cols(),
        });
    }
    let n = r.rows();
    let off_tol = OFF_DIAG_REL_TOL * r.frobenius_norm();
    let mut w = r.clone();
    let mut u = Matrix::identity(n);
    let mut v = Matrix::identity(n);
    let mut stats = SvdStats::default();

    let mut converged = off_norm(&w) <= off_tol;
    while !converged {
        if stats.sweeps == MAX_SWEEPS {
            return Err(SvdError::NoConvergence {
                sweeps: stats.sweeps,
                off_norm: off_norm(&w),
            });
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                rotate_pair(&mut w, &mut u, &mut v, p, q, &mut stats);
            }
        }
        stats.sweeps += 1;
        converged = off_norm(&w) <= off_tol;
    }

    // Signs: flip the U column wherever the diagonal came out negative.
    let mut sigma: Vec<f64> = (0..n).map(|i| w.get(i, i)).collect();
    for (j, s) in sigma.iter_mut().enumerate() {
        if *s < 0.0 {
            *s = -*s;
            for i in 0..n {
                u.set(i, j, -u.get(i, j));
            }
        }
    }
    // Descending sort with stable tie order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap().then(a.cmp(&b)));
    let sigma_sorted: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let u_sorted = permute_columns(&u, &order);
    let v_sorted = permute_columns(&v, &order);

    Ok((
        SvdResult {
            u: u_sorted,
            sigma: Vector::new(sigma_sorted).expect("n >= 1, finite"),
            v: v_sorted,
        },
        stats,
    ))
}

fn off_norm(w: &Matrix) -> f64 {
    let n = w.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let x = w.get(i, j);
                acc += x * x;
            }
        }
    }
    acc.sqrt()
}

/// One two-sided rotation on the (p, q) pair: W <- Rl^T W Rr with
/// R(theta) = [[c, -s], [s, c]], accumulating U <- U Rl and V <- V Rr.
fn rotate_pair(w: &mut Matrix, u: &mut Matrix, v: &mut Matrix, p: usize, q: usize, stats: &mut SvdStats) {
    let wpp = w.get(p, p);
    let wpq = w.get(p, q);
    let wqp = w.get(q, p);
    let wqq = w.get(q, q);
    if wpq == 0.0 && wqp == 0.0 {
        return;
    }

    // Left rotation by phi symmetrizes the block.
    let phi = f64::atan2(wqp - wpq, wpp + wqq);
    let (s_phi, c_phi) = phi.sin_cos();
    let alpha = c_phi * wpp + s_phi * wqp;
    let beta = -s_phi * wpq + c_phi * wqq;
    // Both expressions are algebraically equal; averaging guards rounding.
    let gamma = 0.5 * ((c_phi * wpq + s_phi * wqq) + (-s_phi * wpp + c_phi * wqp));

    // Symmetric Schur rotation by psi diagonalizes [[alpha, gamma], [gamma, beta]].
    let (c_psi, s_psi) = if gamma == 0.0 {
        (1.0, 0.0)
    } else {
        let tau = (alpha - beta) / (2.0 * gamma);
        let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
        let c = 1.0 / (1.0 + t * t).sqrt();
        (c, t * c)
    };

    // Left angle is phi + psi.
    let c_l = c_phi * c_psi - s_phi * s_psi;
    let s_l = s_phi * c_psi + c_phi * s_psi;
    let (c_r, s_r) = (c_psi, s_psi);

    let n = w.rows();
    // Rows p, q of W: apply Rl^T from the left.
    for j in 0..n {
        let a = w.get(p, j);
        let b = w.get(q, j);
        w.set(p, j, c_l * a + s_l * b);
        w.set(q, j, -s_l * a + c_l * b);
    }
    // Columns p, q of W: apply Rr from the right.
    for i in 0..n {
        let a = w.get(i, p);
        let b = w.get(i, q);
        w.set(i, p, c_r * a + s_r * b);
        w.set(i, q, -s_r * a + c_r * b);
    }
    // Accumulate U and V by right-multiplication.
    for i in 0..n {
        let a = u.get(i, p);
        let b = u.get(i, q);
        u.set(i, p, c_l * a + s_l * b);
        u.set(i, q, -s_l * a + c_l * b);
    }
    for i in 0..n {
        let a = v.get(i, p);
        let b = v.get(i, q);
        v.set(i, p, c_r * a + s_r * b);
        v.set(i, q, -s_r * a + c_r * b);
    }
    // Kill rounding residue on the eliminated pair.
    w.set(p, q, 0.0);
    w.set(q, p, 0.0);

    stats.flops += 16 * n as u64 + 15;
}

fn permute_columns(m: &Matrix, order: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..m.rows() {
            out.set(i, new_j, m.get(i, old_j));
        }
    }
    out
}
