//! Cholesky factorization and the handful of dense kernels built on it.
//!
//! The factorization is the single route for log-determinants: the forward
//! value is the sum of log pivots, and the gradient reuses the same factor to
//! form the inverse.

use crate::error::{CoreError, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix
/// stored row-major. Returns the full n×n buffer with the upper triangle
/// zeroed.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    let mut min_pivot = f64::INFINITY;
    let mut min_index = 0usize;
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s < min_pivot {
                    min_pivot = s;
                    min_index = i;
                }
                if s <= 0.0 || !s.is_finite() {
                    return Err(CoreError::NotPositiveDefinite {
                        index: min_index,
                        value: min_pivot,
                    });
                }
                l[i * n + j] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// log det A from the Cholesky factor: 2·Σ log L_ii.
pub fn logdet_from_factor(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Inverse of the factored matrix, via two triangular solves against I.
pub fn inverse_from_factor(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        // forward solve L y = e_j
        for i in 0..n {
            let mut s = if i == j { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * n + k] * col[k];
            }
            col[i] = s / l[i * n + i];
        }
        // back solve L^T x = y
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * inv[k * n + j];
            }
            inv[i * n + j] = s / l[i * n + i];
        }
    }
    inv
}

/// Solves A x = b given the Cholesky factor of A.
pub fn solve_from_factor(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// Convenience: log det of a symmetric positive-definite matrix.
pub fn logdet_spd(a: &[f64], n: usize) -> Result<f64> {
    let l = cholesky(a, n)?;
    Ok(logdet_from_factor(&l, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// LU determinant with partial pivoting; independent oracle for logdet.
    fn lu_det(a: &[f64], n: usize) -> f64 {
        let mut m = a.to_vec();
        let mut det = 1.0;
        for c in 0..n {
            let (mut p, mut best) = (c, m[c * n + c].abs());
            for r in (c + 1)..n {
                if m[r * n + c].abs() > best {
                    best = m[r * n + c].abs();
                    p = r;
                }
            }
            if p != c {
                for k in 0..n {
                    m.swap(c * n + k, p * n + k);
                }
                det = -det;
            }
            det *= m[c * n + c];
            for r in (c + 1)..n {
                let f = m[r * n + c] / m[c * n + c];
                for k in c..n {
                    m[r * n + k] -= f * m[c * n + k];
                }
            }
        }
        det
    }

    fn random_spd(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += b[i * n + k] * b[j * n + k];
                }
                a[i * n + j] = s + if i == j { 0.5 * n as f64 } else { 0.0 };
            }
        }
        a
    }

    #[test]
    fn logdet_identity_is_zero() {
        let i3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(logdet_spd(&i3, 3).unwrap(), 0.0);
    }

    #[test]
    fn logdet_diag_2_3() {
        // direct 2x2 determinant: det diag(2,3) = 6
        let a = [2.0, 0.0, 0.0, 3.0];
        let ld = logdet_spd(&a, 2).unwrap();
        assert!((ld - 6.0_f64.ln()).abs() < 1e-14, "got {ld}");
    }

    #[test]
    fn logdet_matches_lu_pivot_product_up_to_64() {
        let mut rng = crate::rng::substream(11, 99, 0);
        for &n in &[2usize, 5, 16, 33, 64] {
            let a = random_spd(n, &mut rng);
            let ld = logdet_spd(&a, n).unwrap();
            let oracle = lu_det(&a, n).ln();
            assert!(
                (ld - oracle).abs() <= 1e-10 * oracle.abs().max(1.0),
                "n={n}: {ld} vs {oracle}"
            );
        }
    }

    #[test]
    fn non_pd_reports_smallest_pivot() {
        let a = [1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, -1
        match cholesky(&a, 2) {
            Err(CoreError::NotPositiveDefinite { index, value }) => {
                assert_eq!(index, 1);
                assert!(value < 0.0);
            }
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn inverse_from_factor_roundtrip() {
        let mut rng = crate::rng::substream(12, 99, 0);
        let n = 6;
        let a = random_spd(n, &mut rng);
        let l = cholesky(&a, n).unwrap();
        let inv = inverse_from_factor(&l, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += a[i * n + k] * inv[k * n + j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-9, "A·A^-1 [{i},{j}] = {s}");
            }
        }
    }
}
