//! Small dense linear algebra: Cholesky solves for normal equations and a
//! cyclic Jacobi eigendecomposition for symmetric matrices. Everything here
//! is plain f64 loops — deterministic, no BLAS.

use ndarray::{Array1, Array2};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Returns `None` when a pivot falls below `tol` (matrix not PD).
pub fn cholesky(a: &Array2<f64>, tol: f64) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= tol || !sum.is_finite() {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solve `L L^T x = b` given the lower factor `L`.
pub fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}

/// Solve `A x = b` for symmetric positive-definite `A`.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let l = cholesky(a, 0.0)?;
    Some(cholesky_solve(&l, b))
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a, 0.0)?;
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = cholesky_solve(&l, &e);
        inv.column_mut(j).assign(&col);
    }
    // Symmetrize away solve round-off.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    Some(inv)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` sorted by descending eigenvalue;
/// eigenvectors are the columns. The rotation loop runs until the
/// off-diagonal mass is negligible relative to the diagonal, which keeps
/// the eigenvector matrix orthonormal to machine precision.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    if n <= 1 {
        return (m.diag().to_vec(), v);
    }

    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0_f64;
        for i in 0..n {
            for j in i + 1..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        let diag_scale: f64 = m.diag().iter().map(|d| d * d).sum::<f64>().max(1e-300);
        if off <= 1e-30 * diag_scale {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of M.
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                // Accumulate the rotation into V.
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    (eigenvalues, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, Stream::Synth, 99);
        let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let mut a = b.dot(&b.t());
        for i in 0..n {
            a[[i, i]] += n as f64 * 0.1;
        }
        a
    }

    #[test]
    fn cholesky_solve_recovers_solution() {
        let a = random_spd(12, 5);
        let mut rng = stream_rng(5, Stream::Synth, 1);
        let x_true = Array1::from_shape_fn(12, |_| rng.random_range(-2.0..2.0));
        let b = a.dot(&x_true);
        let x = solve_spd(&a, &b).unwrap();
        for i in 0..12 {
            assert!((x[i] - x_true[i]).abs() < 1e-8, "component {i}");
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = Array2::<f64>::eye(3);
        a[[2, 2]] = -1.0;
        assert!(cholesky(&a, 0.0).is_none());
    }

    #[test]
    fn spd_inverse_matches_identity() {
        let a = random_spd(8, 11);
        let inv = spd_inverse(&a).unwrap();
        let prod = a.dot(&inv);
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        // Eigenvalues of [[2,1],[1,2]] are 3 and 1.
        let a = ndarray::array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = jacobi_eigen(&a);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        let vtv = vecs.t().dot(&vecs);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((vtv[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobi_reconstructs_random_symmetric() {
        let n = 30;
        let mut rng = stream_rng(3, Stream::Synth, 2);
        let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let a = &b + &b.t();
        let (vals, vecs) = jacobi_eigen(&a);
        // A == V diag(vals) V^T
        let mut recon = Array2::<f64>::zeros((n, n));
        for k in 0..n {
            let col = vecs.column(k);
            for i in 0..n {
                for j in 0..n {
                    recon[[i, j]] += vals[k] * col[i] * col[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                assert!((recon[[i, j]] - a[[i, j]]).abs() < 1e-9);
            }
        }
        // Descending order.
        for k in 1..n {
            assert!(vals[k - 1] >= vals[k]);
        }
    }
}
