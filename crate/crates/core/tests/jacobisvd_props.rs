//! Jacobi SVD properties: result invariants over random triangular
//! inputs, singular values against the independent tridiagonal
//! eigenvalue oracle applied to RᵀR, invariance under orthogonal
//! multiplication, rank deficiency, and the padded-odd-dimension path.

mod common;

use rand::Rng;
use solarcast::jacobisvd::{pad_even, svd_jacobi};
use solarcast::linalg::Matrix;

fn reconstruct(u: &Matrix, sigma: &[f64], v: &Matrix) -> Matrix {
    let n = sigma.len();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        s.set(i, i, sigma[i]);
    }
    u.matmul(&s).unwrap().matmul(&v.transpose()).unwrap()
}

#[test]
fn result_invariants_on_random_triangular_inputs() {
    for seed in 0..100 {
        let mut rng = common::rng(seed);
        let n = rng.random_range(2..=20);
        let r = common::random_triangular(&mut rng, n, 0.05);
        let svd = svd_jacobi(&r).unwrap();
        let s = svd.sigma.as_slice();

        assert!(s.iter().all(|&x| x >= 0.0), "seed {seed}: non-negative");
        assert!(
            s.windows(2).all(|w| w[0] >= w[1]),
            "seed {seed}: descending"
        );
        let eye = Matrix::identity(n);
        assert!(
            common::frobenius_diff(&svd.u.transpose().matmul(&svd.u).unwrap(), &eye) < 1e-9,
            "seed {seed}: U orthogonal"
        );
        assert!(
            common::frobenius_diff(&svd.v.transpose().matmul(&svd.v).unwrap(), &eye) < 1e-9,
            "seed {seed}: V orthogonal"
        );
        let rec = reconstruct(&svd.u, s, &svd.v);
        assert!(
            common::frobenius_diff(&rec, &r) / r.frobenius_norm() < 1e-9,
            "seed {seed}: reconstruction"
        );
    }
}

#[test]
fn singular_values_match_gram_eigen_oracle() {
    // Forming R^T R squares the condition number, so the oracle resolves
    // sigma_min to about eps * cond^2 relative; keep cond <= 3e3 so the
    // 1e-8 relative comparison stays inside the oracle's accuracy.
    for seed in 0..100 {
        let mut rng = common::rng(1000 + seed);
        let n = rng.random_range(2..=12);
        let cond = 10f64.powf(rng.random_range(0.0..3.5));
        let a = common::random_conditioned(&mut rng, n, n, cond);
        let (_, r) = solarcast::distqr::qr_centralized(&a).unwrap();
        let svd = svd_jacobi(&r).unwrap();

        let gram = r.transpose().matmul(&r).unwrap();
        let eigs = common::symmetric_eigenvalues(&gram);
        for (i, (&sigma, lambda)) in svd.sigma.as_slice().iter().zip(&eigs).enumerate() {
            let expected = lambda.max(0.0).sqrt();
            assert!(
                (sigma - expected).abs() <= 1e-8 * expected.max(1e-12),
                "seed {seed}, sigma[{i}]: {sigma} vs oracle {expected}"
            );
        }
    }
}

#[test]
fn singular_values_invariant_under_orthogonal_multiplication() {
    for seed in 0..30 {
        let mut rng = common::rng(2000 + seed);
        let n = rng.random_range(2..=10);
        let r = common::random_triangular(&mut rng, n, 0.1);
        let base = svd_jacobi(&r).unwrap();
        let left = common::random_orthonormal(&mut rng, n, n);
        let right = common::random_orthonormal(&mut rng, n, n);
        let rotated = left.matmul(&r).unwrap().matmul(&right).unwrap();
        let other = svd_jacobi(&rotated).unwrap();
        for i in 0..n {
            let a = base.sigma.get(i);
            let b = other.sigma.get(i);
            assert!(
                (a - b).abs() <= 1e-9 * a.max(1.0),
                "seed {seed}: sigma[{i}] {a} vs {b}"
            );
        }
    }
}

#[test]
fn zero_singular_values_iff_rank_deficient() {
    for seed in 0..20 {
        let mut rng = common::rng(3000 + seed);
        let n = rng.random_range(3..=10);
        let rank = rng.random_range(1..n);
        // Build an n x n matrix of known rank.
        let u = common::random_orthonormal(&mut rng, n, rank);
        let v = common::random_orthonormal(&mut rng, n, rank);
        let mut scaled: Vec<Vec<f64>> = Vec::new();
        for j in 0..rank {
            let sigma = 1.0 + j as f64;
            scaled.push(u.column(j).iter().map(|x| x * sigma).collect());
        }
        let a = Matrix::from_columns(&scaled)
            .unwrap()
            .matmul(&v.transpose())
            .unwrap();
        let svd = svd_jacobi(&a).unwrap();
        let s = svd.sigma.as_slice();
        let tol = 1e-10 * s[0].max(1.0);
        let zeros = s.iter().filter(|&&x| x <= tol).count();
        assert_eq!(zeros, n - rank, "seed {seed}: rank {rank} of {n}");

        // full-rank control: no zero singular values
        let full = common::random_conditioned(&mut rng, n, n, 100.0);
        let svd = svd_jacobi(&full).unwrap();
        let s = svd.sigma.as_slice();
        assert!(s.iter().all(|&x| x > 1e-10 * s[0]), "seed {seed}: control");
    }
}

#[test]
fn padded_pseudoinverse_equals_unpadded_oracle() {
    // Build the pseudoinverse from the padded SVD of an odd-dimension R
    // and compare against the dense normal-equations-free oracle
    // pinv(R) = V diag(1/sigma) U^T from the unpadded decomposition.
    for seed in 0..20 {
        let mut rng = common::rng(4000 + seed);
        let n = 2 * rng.random_range(1..=4) + 1; // odd
        let r = common::random_triangular(&mut rng, n, 0.2);

        let plain = svd_jacobi(&r).unwrap();
        let pinv_plain = pinv_from(&plain.u, plain.sigma.as_slice(), &plain.v);

        let padded = svd_jacobi(&pad_even(&r)).unwrap();
        let pinv_padded_full = pinv_from(&padded.u, padded.sigma.as_slice(), &padded.v);
        // strip the padded dimension
        let mut pinv_padded = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                pinv_padded.set(i, j, pinv_padded_full.get(i, j));
            }
        }

        assert!(
            common::max_abs_diff(&pinv_plain, &pinv_padded) < 1e-9,
            "seed {seed}"
        );
    }
}

fn pinv_from(u: &Matrix, sigma: &[f64], v: &Matrix) -> Matrix {
    let n = sigma.len();
    let cutoff = 1e-10 * sigma.iter().cloned().fold(0.0, f64::max);
    let mut s_inv = Matrix::zeros(n, n);
    for i in 0..n {
        if sigma[i] > cutoff {
            s_inv.set(i, i, 1.0 / sigma[i]);
        }
    }
    v.matmul(&s_inv).unwrap().matmul(&u.transpose()).unwrap()
}
