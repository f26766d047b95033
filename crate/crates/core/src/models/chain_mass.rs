use std::sync::Arc;

use super::{ModelError, SampleBox, SystemModel, VectorField};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Chain of `M` point masses joined by springs. Mass 1 is pinned at the
/// origin, the velocity of mass `M` is the input.
///
/// State layout: `[p_2 … p_M, v_2 … v_{M−1}]`, dimension `6M − 9`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMass<T> {
    masses: usize,
    pub stiffness: T,
    pub rest_length: T,
    pub mass: T,
    pub gravity: [T; 3],
    pub anchor_end: [T; 3],
}

/// Spring force `D (1 − L/‖b − a‖)(b − a)` exerted on `a` by the spring to `b`.
pub fn spring_force<T: Real>(stiffness: T, rest_length: T, a: &[T], b: &[T]) -> Option<[T; 3]> {
    let delta = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let dist = (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt();
    if !(dist > T::zero()) {
        return None;
    }
    let s = stiffness * (T::one() - rest_length / dist);
    Some([s * delta[0], s * delta[1], s * delta[2]])
}

/// `∂F/∂b` of [`spring_force`]; `∂F/∂a` is its negative.
fn spring_jacobian<T: Real>(stiffness: T, rest_length: T, a: &[T], b: &[T]) -> Option<[[T; 3]; 3]> {
    let delta = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let d2 = delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2];
    let dist = d2.sqrt();
    if !(dist > T::zero()) {
        return None;
    }
    let diag = stiffness * (T::one() - rest_length / dist);
    let outer = stiffness * rest_length / (d2 * dist);
    let mut j = [[T::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            j[r][c] = outer * delta[r] * delta[c];
        }
        j[r][r] += diag;
    }
    Some(j)
}

impl<T: Real> ChainMass<T> {
    pub fn new(masses: usize) -> Result<Self, ModelError> {
        if masses < 3 {
            return Err(ModelError::Config(format!("chain mass needs at least 3 masses, got {masses}")));
        }
        Ok(Self {
            masses,
            stiffness: T::one(),
            rest_length: T::lit(0.033),
            mass: T::lit(0.033),
            gravity: [T::zero(), T::zero(), T::lit(-9.81)],
            anchor_end: [T::one(), T::zero(), T::zero()],
        })
    }

    pub fn masses(&self) -> usize {
        self.masses
    }

    /// Offset of the position of mass `i` (1-based, `2 ≤ i ≤ M`) in the state.
    pub fn pos_index(&self, i: usize) -> usize {
        3 * (i - 2)
    }

    /// Offset of the velocity of mass `i` (1-based, `2 ≤ i ≤ M−1`).
    pub fn vel_index(&self, i: usize) -> usize {
        3 * (self.masses - 1) + 3 * (i - 2)
    }

    fn position<'a>(&self, x: &'a [T], i: usize, origin: &'a [T; 3]) -> &'a [T] {
        if i == 1 {
            origin
        } else {
            let o = self.pos_index(i);
            &x[o..o + 3]
        }
    }

    fn force(&self, x: &[T], i: usize) -> Result<[T; 3], ModelError> {
        // force on mass i from the spring (i, i+1)
        let origin = [T::zero(); 3];
        let a = self.position(x, i, &origin);
        let b = self.position(x, i + 1, &origin);
        spring_force(self.stiffness, self.rest_length, a, b)
            .ok_or(ModelError::CoincidentMasses { first: i, second: i + 1 })
    }

    /// Static equilibrium of the free masses with the last mass at
    /// `anchor_end`, found by damped Newton iteration.
    pub fn rest_configuration(&self) -> Result<Vec<T>, ModelError> {
        let m = self.masses;
        let nfree = 3 * (m - 2);
        let mut x = vec![T::zero(); self.n_x()];
        let last = self.pos_index(m);
        x[last..last + 3].copy_from_slice(&self.anchor_end);
        for i in 2..m {
            let t = T::lit((i - 1) as f64 / (m - 1) as f64);
            let o = self.pos_index(i);
            for k in 0..3 {
                x[o + k] = t * self.anchor_end[k];
            }
            x[o + 2] -= T::lit(0.3) * (T::PI() * t).sin();
        }
        let residual = |x: &[T]| -> Result<Vec<T>, ModelError> {
            let mut r = vec![T::zero(); nfree];
            for i in 2..m {
                let fwd = self.force(x, i)?;
                let back = self.force(x, i - 1)?;
                for k in 0..3 {
                    r[3 * (i - 2) + k] = fwd[k] - back[k] + self.mass * self.gravity[k];
                }
            }
            Ok(r)
        };
        let norm = |r: &[T]| r.iter().fold(T::zero(), |s, v| s + *v * *v).sqrt();
        let mut r = residual(&x)?;
        let mut a = Matrix::zeros(self.n_x(), self.n_x());
        let mut b = Matrix::zeros(self.n_x(), 3);
        for _ in 0..100 {
            let rn = norm(&r);
            if rn <= T::epsilon() * T::lit(16.0) {
                break;
            }
            self.jacobian(&x, &[T::zero(); 3], &mut a, &mut b)?;
            // rows of v̇ against free positions, scaled back by the mass
            let mut jac = Matrix::zeros(nfree, nfree);
            for i in 2..m {
                for j in 2..m {
                    for r0 in 0..3 {
                        for c0 in 0..3 {
                            jac[(3 * (i - 2) + r0, 3 * (j - 2) + c0)] =
                                a[(self.vel_index(i) + r0, self.pos_index(j) + c0)] * self.mass;
                        }
                    }
                }
            }
            let step = match jac.lu() {
                Ok(lu) => lu.solve_vec(&r),
                Err(_) => break,
            };
            let mut t = T::one();
            let mut improved = false;
            for _ in 0..30 {
                let mut trial = x.clone();
                for (k, s) in step.iter().enumerate() {
                    trial[k] -= t * *s;
                }
                if let Ok(rt) = residual(&trial) {
                    if norm(&rt) < rn {
                        x = trial;
                        r = rt;
                        improved = true;
                        break;
                    }
                }
                t *= T::lit(0.5);
            }
            if !improved {
                break;
            }
        }
        let tol = T::epsilon().sqrt() * T::lit(1e-2);
        if norm(&r) > tol.max(T::lit(1e-9)) {
            return Err(ModelError::Config(format!(
                "chain rest configuration did not converge (residual {})",
                norm(&r)
            )));
        }
        Ok(x)
    }
}

impl<T: Real> VectorField<T> for ChainMass<T> {
    fn n_x(&self) -> usize {
        6 * self.masses - 9
    }

    fn n_u(&self) -> usize {
        3
    }

    fn eval(&self, x: &[T], u: &[T], dx: &mut [T]) -> Result<(), ModelError> {
        let m = self.masses;
        let inv_mass = T::one() / self.mass;
        let mut back = self.force(x, 1)?;
        for i in 2..m {
            let p = self.pos_index(i);
            let v = self.vel_index(i);
            let fwd = self.force(x, i)?;
            for k in 0..3 {
                dx[p + k] = x[v + k];
                dx[v + k] = (fwd[k] - back[k]) * inv_mass + self.gravity[k];
            }
            back = fwd;
        }
        let last = self.pos_index(m);
        dx[last..last + 3].copy_from_slice(&u[..3]);
        Ok(())
    }

    fn jacobian(
        &self,
        x: &[T],
        _u: &[T],
        a: &mut Matrix<T>,
        b: &mut Matrix<T>,
    ) -> Result<(), ModelError> {
        let m = self.masses;
        let n = self.n_x();
        for r in 0..n {
            a.row_mut(r).fill(T::zero());
            b.row_mut(r).fill(T::zero());
        }
        let origin = [T::zero(); 3];
        let inv_mass = T::one() / self.mass;
        // spring s joins masses s and s+1
        let springs: Vec<[[T; 3]; 3]> = (1..m)
            .map(|s| {
                spring_jacobian(
                    self.stiffness,
                    self.rest_length,
                    self.position(x, s, &origin),
                    self.position(x, s + 1, &origin),
                )
                .ok_or(ModelError::CoincidentMasses { first: s, second: s + 1 })
            })
            .collect::<Result<_, _>>()?;
        for i in 2..m {
            let p = self.pos_index(i);
            let v = self.vel_index(i);
            for k in 0..3 {
                a[(p + k, v + k)] = T::one();
            }
            let s_back = &springs[i - 2];
            let s_fwd = &springs[i - 1];
            for r in 0..3 {
                for c in 0..3 {
                    a[(v + r, p + c)] = -(s_fwd[r][c] + s_back[r][c]) * inv_mass;
                    a[(v + r, self.pos_index(i + 1) + c)] = s_fwd[r][c] * inv_mass;
                    if i > 2 {
                        a[(v + r, self.pos_index(i - 1) + c)] = s_back[r][c] * inv_mass;
                    }
                }
            }
        }
        let last = self.pos_index(m);
        for k in 0..3 {
            b[(last + k, k)] = T::one();
        }
        Ok(())
    }
}

pub(super) fn model<T: Real>(field: ChainMass<T>) -> Result<SystemModel<T>, ModelError> {
    let x_e = field.rest_configuration()?;
    let m = field.masses;
    let mut lower = Vec::with_capacity(field.n_x());
    let mut upper = Vec::with_capacity(field.n_x());
    let q = T::lit(0.25);
    let wall = T::lit(-0.1);
    for i in 2..=m {
        let o = field.pos_index(i);
        lower.extend([-q, (wall - x_e[o + 1]).max(-q), -q]);
        upper.extend([q, q, q]);
    }
    let v = T::lit(0.5);
    for _ in 2..m {
        lower.extend([-v; 3]);
        upper.extend([v; 3]);
    }
    SystemModel::new(
        Arc::new(field),
        x_e,
        vec![T::zero(); 3],
        T::lit(0.133),
        15,
        5,
        SampleBox { lower, upper },
    )
}
