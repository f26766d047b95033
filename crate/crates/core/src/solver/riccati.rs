use crate::linalg::{LinalgError, Matrix};
use crate::scalar::Real;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("doubling iteration did not converge in {iters} steps (last change {change})")]
    NotConverged { iters: usize, change: f64 },
    #[error("Riccati iteration failed: {0}")]
    Linalg(#[from] LinalgError),
}

/// Stabilizing solution of `P = AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q` by the
/// structure-preserving doubling algorithm.
pub fn solve_dare<T: Real>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    q: &Matrix<T>,
    r: &Matrix<T>,
    tol: T,
    max_iter: usize,
) -> Result<Matrix<T>, RiccatiError> {
    let n = a.rows();
    let rinv_bt = r.solve(&b.transpose())?;
    let mut g = b.matmul(&rinv_bt).symmetrize();
    let mut h = q.symmetrize();
    let mut ak = a.clone();
    let eye = Matrix::identity(n);
    let mut change = T::infinity();
    for _ in 0..max_iter {
        let w = eye.add(&g.matmul(&h));
        let lu = w.lu()?;
        let winv_a = lu.solve_matrix(&ak);
        let winv_g = lu.solve_matrix(&g);
        let h_next = h.add(&ak.transpose().matmul(&h).matmul(&winv_a)).symmetrize();
        let g_next = g.add(&ak.matmul(&winv_g).matmul(&ak.transpose())).symmetrize();
        let a_next = ak.matmul(&winv_a);
        change = h_next.sub(&h).max_abs() / (T::one() + h_next.max_abs());
        h = h_next;
        g = g_next;
        ak = a_next;
        if !h.is_finite() {
            break;
        }
        if change <= tol {
            return Ok(h);
        }
    }
    Err(RiccatiError::NotConverged { iters: max_iter, change: change.to_f64_lossy() })
}

/// `K = −(R + BᵀPB)⁻¹ BᵀPA`
pub fn lqr_gain<T: Real>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    p: &Matrix<T>,
    r: &Matrix<T>,
) -> Result<Matrix<T>, LinalgError> {
    let btp = b.transpose().matmul(p);
    let lhs = r.add(&btp.matmul(b));
    Ok(lhs.solve(&btp.matmul(a))?.scale(-T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_integrator(h: f64) -> (Matrix<f64>, Matrix<f64>) {
        let a = Matrix::from_rows(&[vec![1.0, h], vec![0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.5 * h * h], vec![h]]).unwrap();
        (a, b)
    }

    fn naive_recursion(a: &Matrix<f64>, b: &Matrix<f64>, q: &Matrix<f64>, r: &Matrix<f64>, iters: usize) -> Matrix<f64> {
        let mut p = q.clone();
        for _ in 0..iters {
            let k = lqr_gain(a, b, &p, r).unwrap();
            let acl = a.add(&b.matmul(&k));
            p = q.add(&k.transpose().matmul(r).matmul(&k)).add(&acl.transpose().matmul(&p).matmul(&acl)).symmetrize();
        }
        p
    }

    #[test]
    fn doubling_matches_fixed_point_iteration() {
        let (a, b) = double_integrator(0.1);
        let q = Matrix::identity(2);
        let r = Matrix::identity(1);
        let p = solve_dare(&a, &b, &q, &r, 1e-14, 100).unwrap();
        let oracle = naive_recursion(&a, &b, &q, &r, 10_000);
        assert!(p.sub(&oracle).max_abs() <= 1e-10 * (1.0 + oracle.max_abs()), "{p:?} vs {oracle:?}");
    }

    #[test]
    fn riccati_residual_vanishes_on_unstable_system() {
        let a = Matrix::from_rows(&[vec![1.2, 0.3, 0.0], vec![0.0, 0.9, 0.5], vec![0.1, 0.0, 1.1]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.3, 0.2]]).unwrap();
        let q = Matrix::from_diag(&[1.0, 2.0, 0.5]);
        let r = Matrix::from_diag(&[0.1, 1.0]);
        let p = solve_dare(&a, &b, &q, &r, 1e-14, 100).unwrap();
        let k = lqr_gain(&a, &b, &p, &r).unwrap();
        let acl = a.add(&b.matmul(&k));
        let res = q.add(&k.transpose().matmul(&r).matmul(&k)).add(&acl.transpose().matmul(&p).matmul(&acl)).sub(&p);
        assert!(res.max_abs() < 1e-9 * p.max_abs());
        p.cholesky().unwrap();
    }
}
