use std::sync::Arc;

use super::{ModelError, SampleBox, SystemModel, VectorField};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Ten-state quadcopter, state `[x1 x2 x3 v1 v2 v3 φ1 ω1 φ2 ω2]`, input
/// `[u1 u2 u3]` (two tilt commands and thrust).
///
/// The angular-rate equation is `ω̇ = −d0·φ + n0·u`, with `d0` multiplying
/// the angle.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadcopter<T> {
    pub d0: T,
    pub d1: T,
    pub n0: T,
    pub k_t: T,
    pub mass: T,
    pub g: T,
}

impl<T: Real> Default for Quadcopter<T> {
    fn default() -> Self {
        Self {
            d0: T::lit(80.0),
            d1: T::lit(8.0),
            n0: T::lit(40.0),
            k_t: T::lit(0.91),
            mass: T::lit(1.3),
            g: T::lit(9.81),
        }
    }
}

impl<T: Real> Quadcopter<T> {
    pub const PHI: [usize; 2] = [6, 8];
    pub const OMEGA: [usize; 2] = [7, 9];

    /// Hover thrust `g·m/k_T`.
    pub fn hover_thrust(&self) -> T {
        self.g * self.mass / self.k_t
    }
}

impl<T: Real> VectorField<T> for Quadcopter<T> {
    fn n_x(&self) -> usize {
        10
    }

    fn n_u(&self) -> usize {
        3
    }

    fn eval(&self, x: &[T], u: &[T], dx: &mut [T]) -> Result<(), ModelError> {
        dx[0] = x[3];
        dx[1] = x[4];
        dx[2] = x[5];
        dx[3] = self.g * x[6].tan();
        dx[4] = self.g * x[8].tan();
        dx[5] = -self.g + self.k_t / self.mass * u[2];
        for i in 0..2 {
            let (phi, omega) = (Self::PHI[i], Self::OMEGA[i]);
            dx[phi] = -self.d1 * x[phi] + x[omega];
            dx[omega] = -self.d0 * x[phi] + self.n0 * u[i];
        }
        Ok(())
    }

    fn jacobian(
        &self,
        x: &[T],
        _u: &[T],
        a: &mut Matrix<T>,
        b: &mut Matrix<T>,
    ) -> Result<(), ModelError> {
        for r in 0..10 {
            a.row_mut(r).fill(T::zero());
            b.row_mut(r).fill(T::zero());
        }
        a[(0, 3)] = T::one();
        a[(1, 4)] = T::one();
        a[(2, 5)] = T::one();
        let sec2 = |phi: T| {
            let c = phi.cos();
            T::one() / (c * c)
        };
        a[(3, 6)] = self.g * sec2(x[6]);
        a[(4, 8)] = self.g * sec2(x[8]);
        b[(5, 2)] = self.k_t / self.mass;
        for i in 0..2 {
            let (phi, omega) = (Self::PHI[i], Self::OMEGA[i]);
            a[(phi, phi)] = -self.d1;
            a[(phi, omega)] = T::one();
            a[(omega, phi)] = -self.d0;
            b[(omega, i)] = self.n0;
        }
        Ok(())
    }
}

pub(super) fn model<T: Real>(field: Quadcopter<T>) -> Result<SystemModel<T>, ModelError> {
    let u_e = vec![T::zero(), T::zero(), field.hover_thrust()];
    let tilt = T::PI() / T::lit(9.0);
    let rate = T::lit(3.0) * T::PI();
    let lower = [-2.5, -2.5, -3.0, -3.0, -3.0, -5.0].map(T::lit);
    let upper = [0.145, 2.5, 3.0, 3.0, 3.0, 5.0].map(T::lit);
    let mut lo = lower.to_vec();
    let mut hi = upper.to_vec();
    lo.extend([-tilt, -rate, -tilt, -rate]);
    hi.extend([tilt, rate, tilt, rate]);
    SystemModel::new(
        Arc::new(field),
        vec![T::zero(); 10],
        u_e,
        T::lit(0.1),
        10,
        10,
        SampleBox { lower: lo, upper: hi },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BenchmarkId;

    #[test]
    fn hover_is_exact_equilibrium() {
        let m = SystemModel::<f64>::benchmark(BenchmarkId::Quadcopter).unwrap();
        assert!((m.u_e()[2] - 14.014_285_714_285_714).abs() < 1e-12);
        let dx = m.dynamics(&[0.0; 10], m.u_e()).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0), "{dx:?}");
    }

    #[test]
    fn affine_in_input() {
        let m = SystemModel::<f64>::benchmark(BenchmarkId::Quadcopter).unwrap();
        let x = [0.1, -0.2, 0.3, 0.5, -0.4, 0.2, 0.15, 1.0, -0.1, -2.0];
        let u1 = [0.3, -0.5, 12.0];
        let u2 = [-0.7, 0.1, 3.0];
        for alpha in [0.0, 0.25, 0.6, 1.0] {
            let mix: Vec<f64> = u1.iter().zip(u2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let lhs = m.dynamics(&x, &mix).unwrap();
            let f1 = m.dynamics(&x, &u1).unwrap();
            let f2 = m.dynamics(&x, &u2).unwrap();
            for i in 0..10 {
                let rhs = alpha * f1[i] + (1.0 - alpha) * f2[i];
                assert!((lhs[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }
}
