use std::sync::Arc;

use super::{ModelError, SampleBox, SystemModel, VectorField};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Continuous stirred tank reactor with two states and one input.
#[derive(Debug, Clone, PartialEq)]
pub struct StirTank<T> {
    pub theta: T,
    pub k: T,
    pub m: T,
    pub x_f: T,
    pub x_c: T,
    pub gamma: T,
}

impl<T: Real> Default for StirTank<T> {
    fn default() -> Self {
        Self {
            theta: T::lit(20.0),
            k: T::lit(300.0),
            m: T::lit(5.0),
            x_f: T::lit(0.3947),
            x_c: T::lit(0.3816),
            gamma: T::lit(0.117),
        }
    }
}

impl<T: Real> StirTank<T> {
    /// Published regulation target, quoted to four digits.
    pub fn published_equilibrium() -> ([T; 2], T) {
        ([T::lit(0.2632), T::lit(0.6519)], T::lit(0.7853))
    }

    /// Exact stationary point with `x_1` pinned to its published value.
    ///
    /// The first equation fixes `x_2`, the second then fixes `u`. With the
    /// printed parameters this gives `x_2 ≈ 0.651881`, `u ≈ 0.758342`.
    pub fn equilibrium(&self) -> ([T; 2], T) {
        let x1 = Self::published_equilibrium().0[0];
        let r = (T::one() - x1) / (self.theta * self.k * x1);
        let x2 = -self.m / r.ln();
        let reaction = self.k * x1 * (-self.m / x2).exp();
        let u = ((self.x_f - x2) / self.theta + reaction) / (self.gamma * (x2 - self.x_c));
        ([x1, x2], u)
    }
}

impl<T: Real> VectorField<T> for StirTank<T> {
    fn n_x(&self) -> usize {
        2
    }

    fn n_u(&self) -> usize {
        1
    }

    fn eval(&self, x: &[T], u: &[T], dx: &mut [T]) -> Result<(), ModelError> {
        let reaction = self.k * x[0] * (-self.m / x[1]).exp();
        dx[0] = (T::one() - x[0]) / self.theta - reaction;
        dx[1] = (self.x_f - x[1]) / self.theta + reaction - self.gamma * u[0] * (x[1] - self.x_c);
        Ok(())
    }

    fn jacobian(
        &self,
        x: &[T],
        u: &[T],
        a: &mut Matrix<T>,
        b: &mut Matrix<T>,
    ) -> Result<(), ModelError> {
        let e = (-self.m / x[1]).exp();
        let dr_dx1 = self.k * e;
        let dr_dx2 = self.k * x[0] * e * self.m / (x[1] * x[1]);
        let inv_theta = T::one() / self.theta;
        a[(0, 0)] = -inv_theta - dr_dx1;
        a[(0, 1)] = -dr_dx2;
        a[(1, 0)] = dr_dx1;
        a[(1, 1)] = -inv_theta + dr_dx2 - self.gamma * u[0];
        b[(0, 0)] = T::zero();
        b[(1, 0)] = -self.gamma * (x[1] - self.x_c);
        Ok(())
    }
}

pub(super) fn model<T: Real>(field: StirTank<T>) -> Result<SystemModel<T>, ModelError> {
    let (x_e, u_e) = field.equilibrium();
    let half = T::lit(0.2);
    SystemModel::new(
        Arc::new(field),
        x_e.to_vec(),
        vec![u_e],
        T::lit(2.0),
        10,
        10,
        SampleBox::symmetric(&[half, half]),
    )
}
