//! Shared test helpers: seeded generators for matrices with controlled
//! conditioning, random contiguous partitions, and the independent
//! oracles (normal-equations solve, tridiagonalization + Sturm-bisection
//! eigenvalues) that the library results are checked against. Nothing
//! here calls into the decomposition paths under test except the
//! input generators.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use solarcast::distqr;
use solarcast::linalg::{ColumnPartition, Matrix, Vector};

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Matrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Orthonormal columns via QR of a Gaussian matrix (input generation
/// only; orthonormality is machine-exact regardless of the QR used).
pub fn random_orthonormal(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Matrix {
    loop {
        let g = gaussian_matrix(rng, rows, cols);
        if let Ok((q, _)) = distqr::qr_centralized(&g) {
            return q;
        }
    }
}

/// Random `rows x cols` matrix with singular values log-spaced between 1
/// and 1/cond.
pub fn random_conditioned(
    rng: &mut ChaCha12Rng,
    rows: usize,
    cols: usize,
    cond: f64,
) -> Matrix {
    let u = random_orthonormal(rng, rows, cols);
    let v = random_orthonormal(rng, cols, cols);
    let mut scaled_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let exponent = if cols == 1 {
            0.0
        } else {
            j as f64 / (cols - 1) as f64
        };
        let sigma = cond.powf(-exponent);
        scaled_cols.push(u.column(j).iter().map(|x| x * sigma).collect());
    }
    let ud = Matrix::from_columns(&scaled_cols).unwrap();
    ud.matmul(&v.transpose()).unwrap()
}

/// Random upper-triangular matrix with the given diagonal magnitudes.
pub fn random_triangular(rng: &mut ChaCha12Rng, n: usize, diag_min: f64) -> Matrix {
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mag: f64 = rng.random::<f64>() + diag_min;
        r.set(i, i, sign * mag);
        for j in i + 1..n {
            let x: f64 = StandardNormal.sample(rng);
            r.set(i, j, x);
        }
    }
    r
}

/// Random contiguous column partition over 1..=cols nodes.
pub fn random_partition(rng: &mut ChaCha12Rng, cols: usize) -> ColumnPartition {
    let nodes = rng.random_range(1..=cols);
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() < nodes - 1 {
        let c = rng.random_range(1..cols);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(nodes);
    let mut prev = 0;
    for c in cuts {
        sizes.push(c - prev);
        prev = c;
    }
    sizes.push(cols - prev);
    ColumnPartition::from_block_sizes(&sizes).unwrap()
}

pub fn frobenius_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm()
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            worst = worst.max((a.get(i, j) - b.get(i, j)).abs());
        }
    }
    worst
}

/// Independent least-squares oracle: solves the normal equations
/// `(X^T X) c = X^T b` by Gaussian elimination with partial pivoting.
pub fn normal_equations_solve(x: &Matrix, b: &Vector) -> Vec<f64> {
    let xt = x.transpose();
    let g = xt.matmul(x).unwrap();
    let rhs = xt.mul_vector(b).unwrap();
    let n = g.rows();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| g.get(i, j)).collect();
            row.push(rhs.get(i));
            row
        })
        .collect();
    for k in 0..n {
        let pivot_row = (k..n)
            .max_by(|&p, &q| a[p][k].abs().partial_cmp(&a[q][k].abs()).unwrap())
            .unwrap();
        a.swap(k, pivot_row);
        let pivot = a[k][k];
        assert!(pivot.abs() > 1e-300, "oracle hit a singular system");
        for i in k + 1..n {
            let factor = a[i][k] / pivot;
            for j in k..=n {
                a[i][j] -= factor * a[k][j];
            }
        }
    }
    let mut c = vec![0.0; n];
    for k in (0..n).rev() {
        let mut acc = a[k][n];
        for j in k + 1..n {
            acc -= a[k][j] * c[j];
        }
        c[k] = acc / a[k][k];
    }
    c
}

/// Independent symmetric eigenvalue oracle: Householder
/// tridiagonalization followed by Sturm-sequence bisection. Returns the
/// eigenvalues in descending order.
pub fn symmetric_eigenvalues(s: &Matrix) -> Vec<f64> {
    let n = s.rows();
    assert_eq!(n, s.cols());
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| s.get(i, j)).collect())
        .collect();

    for k in 0..n.saturating_sub(2) {
        let mut norm2 = 0.0;
        for row in a.iter().skip(k + 1) {
            norm2 += row[k] * row[k];
        }
        let norm = norm2.sqrt();
        if norm <= 1e-300 {
            continue;
        }
        let alpha = if a[k + 1][k] > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n];
        for (i, row) in a.iter().enumerate().skip(k + 1) {
            v[i] = row[k];
        }
        v[k + 1] -= alpha;
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv <= 1e-300 {
            continue;
        }
        let beta = 2.0 / vtv;
        // w = beta * A v, then w <- w - (beta/2 v^T w) v
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[i][j] * v[j];
            }
            w[i] = beta * acc;
        }
        let correction = 0.5 * beta * v.iter().zip(&w).map(|(vi, wi)| vi * wi).sum::<f64>();
        for i in 0..n {
            w[i] -= correction * v[i];
        }
        for i in 0..n {
            for j in 0..n {
                a[i][j] -= v[i] * w[j] + w[i] * v[j];
            }
        }
    }

    let d: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    let e: Vec<f64> = (0..n.saturating_sub(1)).map(|i| a[i + 1][i]).collect();

    // Gershgorin interval containing every eigenvalue.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let left = if i > 0 { e[i - 1].abs() } else { 0.0 };
        let right = if i < n - 1 { e[i].abs() } else { 0.0 };
        lo = lo.min(d[i] - left - right);
        hi = hi.max(d[i] + left + right);
    }
    if n == 1 {
        return vec![d[0]];
    }

    let count_below = |x: f64| -> usize {
        let mut count = 0;
        let mut q = 1.0f64;
        for i in 0..n {
            let off2 = if i == 0 { 0.0 } else { e[i - 1] * e[i - 1] };
            let denom = if q.abs() < 1e-300 {
                1e-300f64.copysign(q)
            } else {
                q
            };
            q = d[i] - x - off2 / denom;
            if q < 0.0 {
                count += 1;
            }
        }
        count
    };

    let mut eigs = Vec::with_capacity(n);
    for k in 0..n {
        let (mut a_lo, mut a_hi) = (lo, hi);
        for _ in 0..120 {
            let mid = 0.5 * (a_lo + a_hi);
            if count_below(mid) > k {
                a_hi = mid;
            } else {
                a_lo = mid;
            }
        }
        eigs.push(0.5 * (a_lo + a_hi));
    }
    eigs.reverse(); // descending
    eigs
}
