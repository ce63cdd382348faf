//! Oracles written independently of the library code paths they check.

#![allow(dead_code)]

use mvlab_core::Matrix;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// Spectral norm of `(I − 11ᵀ/T) A (I − 11ᵀ/T)` from the eigenvalues of its
/// Gram matrix, all formed densely.
pub fn centered_spectral_norm(a: &Matrix) -> f64 {
    let t = a.rows();
    let p = |i: usize, j: usize| f64::from(u8::from(i == j)) - 1.0 / t as f64;
    let mut pa = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in 0..t {
            pa[i][j] = (0..t).map(|k| p(i, k) * a[(k, j)]).sum();
        }
    }
    let mut pap = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in 0..t {
            pap[i][j] = (0..t).map(|k| pa[i][k] * p(k, j)).sum();
        }
    }
    let mut gram = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in 0..t {
            gram[i][j] = (0..t).map(|k| pap[k][i] * pap[k][j]).sum();
        }
    }
    jacobi_eigenvalues(&gram).into_iter().fold(0.0, f64::max).sqrt()
}

/// Ordinary least squares with intercept via the normal equations solved by
/// Gaussian elimination with partial pivoting; returns `[intercept, w...]`.
pub fn ols(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = x[0].len() + 1;
    let mut a = vec![vec![0.0; k + 1]; k];
    for (row, &target) in x.iter().zip(y) {
        let z: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for i in 0..k {
            for j in 0..k {
                a[i][j] += z[i] * z[j];
            }
            a[i][k] += z[i] * target;
        }
    }
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..k).map(|i| a[i][k] / a[i][i]).collect()
}

/// Largest singular value of `a`, from the eigenvalues of `aᵀa`.
pub fn spectral_norm(a: &Matrix) -> f64 {
    let n = a.cols();
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..a.rows()).map(|k| a[(k, i)] * a[(k, j)]).sum())
                .collect()
        })
        .collect();
    jacobi_eigenvalues(&gram)
        .into_iter()
        .fold(0.0, f64::max)
        .max(0.0)
        .sqrt()
}
