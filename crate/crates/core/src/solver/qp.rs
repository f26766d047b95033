//! Dense strictly convex QP, `min ½ xᵀHx + gᵀx  s.t.  A x ≤ b`, solved with
//! the Goldfarb–Idnani dual active-set method.
//!
//! The factorization `J = L⁻ᵀ Q` and the triangular `R` are stored by
//! columns and updated with Givens rotations on every add and drop.

use crate::linalg::{LinalgError, Matrix};
use crate::scalar::{dot, Real};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum QpError {
    #[error("Hessian is not positive definite: {0}")]
    NotConvex(#[from] LinalgError),
    #[error("constraints are infeasible (detected at row {row})")]
    Infeasible { row: usize },
    #[error("active-set iteration limit {0} reached")]
    MaxIterations(usize),
    #[error("{0}")]
    Shape(String),
}

#[derive(Debug, Clone)]
pub struct QpSolution<T> {
    pub x: Vec<T>,
    /// One multiplier per row of `A`, zero for inactive rows.
    pub multipliers: Vec<T>,
    pub active: Vec<usize>,
    pub iterations: usize,
    pub objective: T,
}

struct Factor<T> {
    j: Vec<Vec<T>>,
    r: Vec<Vec<T>>,
}

#[inline]
fn rotate<T: Real>(a: &mut [T], b: &mut [T], c: T, s: T) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (p, q) = (*x, *y);
        *x = c * p + s * q;
        *y = c * q - s * p;
    }
}

fn pair_mut<T>(v: &mut [Vec<T>], i: usize, k: usize) -> (&mut Vec<T>, &mut Vec<T>) {
    debug_assert!(i < k);
    let (lo, hi) = v.split_at_mut(k);
    (&mut lo[i], &mut hi[0])
}

impl<T: Real> Factor<T> {
    fn add(&mut self, mut d: Vec<T>) {
        let q = self.r.len();
        let n = d.len();
        for c in (q + 1..n).rev() {
            if d[c] == T::zero() {
                continue;
            }
            let h = d[c - 1].hypot(d[c]);
            let (cs, sn) = (d[c - 1] / h, d[c] / h);
            d[c - 1] = h;
            d[c] = T::zero();
            let (a, b) = pair_mut(&mut self.j, c - 1, c);
            rotate(a, b, cs, sn);
        }
        d.truncate(q + 1);
        self.r.push(d);
    }

    fn drop(&mut self, l: usize) {
        self.r.remove(l);
        let q = self.r.len();
        for i in l..q {
            let (a, b) = (self.r[i][i], self.r[i][i + 1]);
            let h = a.hypot(b);
            if h == T::zero() {
                continue;
            }
            let (cs, sn) = (a / h, b / h);
            for col in self.r[i..].iter_mut() {
                let (p, s) = (col[i], col[i + 1]);
                col[i] = cs * p + sn * s;
                col[i + 1] = cs * s - sn * p;
            }
            let (ja, jb) = pair_mut(&mut self.j, i, i + 1);
            rotate(ja, jb, cs, sn);
        }
        for (k, col) in self.r.iter_mut().enumerate().skip(l) {
            col.truncate(k + 1);
        }
    }

    /// `R⁻¹ v` by back substitution.
    fn solve_r(&self, v: &[T]) -> Vec<T> {
        let q = self.r.len();
        let mut out = v[..q].to_vec();
        for i in (0..q).rev() {
            let mut s = out[i];
            for k in i + 1..q {
                s -= self.r[k][i] * out[k];
            }
            out[i] = s / self.r[i][i];
        }
        out
    }
}

/// Solves the QP; rows of `a` are constraint normals.
pub fn solve_qp<T: Real>(
    h: &Matrix<T>,
    g: &[T],
    a: &Matrix<T>,
    b: &[T],
    max_iter: usize,
) -> Result<QpSolution<T>, QpError> {
    let n = g.len();
    let m = a.rows();
    if h.shape() != (n, n) || (m > 0 && a.cols() != n) || b.len() != m {
        return Err(QpError::Shape(format!(
            "H {:?}, g {}, A {:?}, b {}",
            h.shape(),
            n,
            a.shape(),
            b.len()
        )));
    }
    let chol = h.cholesky()?;
    let mut f = Factor { j: Vec::with_capacity(n), r: Vec::new() };
    let mut e = vec![T::zero(); n];
    for c in 0..n {
        e.fill(T::zero());
        e[c] = T::one();
        f.j.push(chol.solve_upper(&e));
    }
    let mut x: Vec<T> = chol.solve(g).into_iter().map(|v| -v).collect();
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<T> = Vec::new();
    let mut is_active = vec![false; m];
    let eps = T::epsilon();
    let hundred = T::lit(100.0);
    let row_norms: Vec<T> = (0..m).map(|i| a.row(i).iter().fold(T::zero(), |s, v| s + v.abs())).collect();
    let mut iterations = 0usize;

    loop {
        let xnorm = x.iter().fold(T::zero(), |s, v| s.max(v.abs()));
        let mut pick = None;
        let mut worst = T::zero();
        for i in 0..m {
            if is_active[i] || row_norms[i] == T::zero() {
                continue;
            }
            let s = b[i] - dot(a.row(i), &x);
            let tol = hundred * eps * (T::one() + b[i].abs() + row_norms[i] * xnorm);
            if s < -tol {
                let scaled = s / row_norms[i];
                if scaled < worst {
                    worst = scaled;
                    pick = Some(i);
                }
            }
        }
        let Some(p) = pick else {
            let hx = h.mul_vec(&x);
            let objective = T::lit(0.5) * dot(&x, &hx) + dot(g, &x);
            let mut multipliers = vec![T::zero(); m];
            for (k, &i) in active.iter().enumerate() {
                multipliers[i] = u[k];
            }
            return Ok(QpSolution { x, multipliers, active, iterations, objective });
        };
        let np: Vec<T> = a.row(p).iter().map(|v| -*v).collect();
        let mut s_p = b[p] - dot(a.row(p), &x);
        let mut u_p = T::zero();
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::MaxIterations(max_iter));
            }
            let q = active.len();
            let d: Vec<T> = f.j.iter().map(|col| dot(col, &np)).collect();
            let mut z = vec![T::zero(); n];
            let mut tail = T::zero();
            for c in q..n {
                tail += d[c] * d[c];
                let dc = d[c];
                for (zi, ji) in z.iter_mut().zip(&f.j[c]) {
                    *zi += dc * *ji;
                }
            }
            let total = d.iter().fold(T::zero(), |s, v| s + *v * *v);
            let r = f.solve_r(&d);
            let rmax = r.iter().fold(T::zero(), |s, v| s.max(v.abs()));
            let mut t1 = T::infinity();
            let mut drop_at = None;
            for k in 0..q {
                if r[k] > eps * rmax {
                    let ratio = u[k] / r[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(k);
                    }
                }
            }
            let z_zero = tail <= (hundred * eps) * (hundred * eps) * total;
            let t2 = if z_zero { T::infinity() } else { -s_p / tail };
            let t = t1.min(t2);
            if t.is_infinite() {
                return Err(QpError::Infeasible { row: p });
            }
            for k in 0..q {
                u[k] -= t * r[k];
            }
            u_p += t;
            if !z_zero {
                for (xi, zi) in x.iter_mut().zip(&z) {
                    *xi += t * *zi;
                }
            }
            if !z_zero && t2 <= t1 {
                f.add(d);
                active.push(p);
                u.push(u_p);
                is_active[p] = true;
                break;
            }
            let l = drop_at.expect("partial step has a blocking multiplier");
            is_active[active[l]] = false;
            active.remove(l);
            u.remove(l);
            f.drop(l);
            if !z_zero {
                s_p = b[p] - dot(a.row(p), &x);
                let tol = hundred * eps * (T::one() + b[p].abs());
                if s_p >= -tol {
                    break;
                }
            }
        }
    }
}
