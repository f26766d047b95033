//! Fixed-step RK4 discretization and horizon rollouts.
//!
//! [`step`] and [`rollout`] work in original coordinates; the `_shifted`
//! variants implement the discrete map `f(x̃, ũ) = Φ(x_e + x̃, u_e + ũ) − x_e`
//! used by the cost, the feasibility checks, the solver and the closed-loop
//! plant alike.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::models::{ModelError, SystemModel};
use crate::scalar::{all_finite, Real};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("integration diverged at stage {stage}, substep {substep}")]
    Divergence { stage: usize, substep: usize },
    #[error("model evaluation failed at stage {stage}: {source}")]
    Model { stage: usize, source: ModelError },
    #[error("input sequence has {got} stages, model horizon is {expected}")]
    Horizon { expected: usize, got: usize },
    #[error("substeps must be at least 1")]
    Substeps,
}

impl RolloutError {
    fn at_stage(self, k: usize) -> Self {
        match self {
            Self::Divergence { substep, .. } => Self::Divergence { stage: k, substep },
            Self::Model { source, .. } => Self::Model { stage: k, source },
            other => other,
        }
    }
}

/// `N` input vectors `u_0 … u_{N−1}` stored contiguously.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSequence<T> {
    n_u: usize,
    data: Vec<T>,
}

impl<T: Real> InputSequence<T> {
    /// Panics if `data.len()` is not a multiple of `n_u`.
    pub fn new(n_u: usize, data: Vec<T>) -> Self {
        assert!(n_u > 0 && data.len() % n_u == 0, "input sequence of {} values with n_u = {n_u}", data.len());
        Self { n_u, data }
    }

    pub fn zeros(n_u: usize, horizon: usize) -> Self {
        Self::new(n_u, vec![T::zero(); n_u * horizon])
    }

    pub fn constant(u: &[T], horizon: usize) -> Self {
        Self::new(u.len(), u.repeat(horizon))
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn horizon(&self) -> usize {
        self.data.len() / self.n_u
    }

    pub fn stage(&self, k: usize) -> &[T] {
        &self.data[k * self.n_u..(k + 1) * self.n_u]
    }

    pub fn stage_mut(&mut self, k: usize) -> &mut [T] {
        &mut self.data[k * self.n_u..(k + 1) * self.n_u]
    }

    pub fn first(&self) -> &[T] {
        self.stage(0)
    }

    pub fn stages(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.n_u)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// `{u_1, …, u_{N−1}, tail}`
    pub fn shift_append(&self, tail: &[T]) -> Self {
        assert_eq!(tail.len(), self.n_u);
        let mut data = self.data[self.n_u..].to_vec();
        data.extend_from_slice(tail);
        Self { n_u: self.n_u, data }
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn cast<U: Real>(&self) -> InputSequence<U> {
        InputSequence { n_u: self.n_u, data: crate::scalar::cast_slice(&self.data) }
    }
}

/// Predicted states `φ(0) … φ(N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory<T> {
    n_x: usize,
    data: Vec<T>,
}

impl<T: Real> StateTrajectory<T> {
    pub fn len(&self) -> usize {
        self.data.len() / self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state(&self, k: usize) -> &[T] {
        &self.data[k * self.n_x..(k + 1) * self.n_x]
    }

    pub fn last(&self) -> &[T] {
        self.state(self.len() - 1)
    }

    pub fn states(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.n_x)
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// Drops `φ(0)` and appends `next`; the prediction one step later.
    pub fn shift_append(&self, next: &[T]) -> Self {
        assert_eq!(next.len(), self.n_x, "state width");
        let mut data = Vec::with_capacity(self.data.len());
        data.extend_from_slice(&self.data[self.n_x..]);
        data.extend_from_slice(next);
        Self { n_x: self.n_x, data }
    }
}

fn rk4_substep<T: Real>(
    model: &SystemModel<T>,
    x: &mut [T],
    u: &[T],
    h: T,
    scratch: &mut [Vec<T>; 5],
) -> Result<(), ModelError> {
    let field = model.field();
    let half = h * T::lit(0.5);
    let [k1, k2, k3, k4, tmp] = scratch;
    field.eval(x, u, k1)?;
    for i in 0..x.len() {
        tmp[i] = x[i] + half * k1[i];
    }
    field.eval(tmp, u, k2)?;
    for i in 0..x.len() {
        tmp[i] = x[i] + half * k2[i];
    }
    field.eval(tmp, u, k3)?;
    for i in 0..x.len() {
        tmp[i] = x[i] + h * k3[i];
    }
    field.eval(tmp, u, k4)?;
    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    for i in 0..x.len() {
        x[i] += sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
    }
    Ok(())
}

fn scratch<T: Real>(n: usize) -> [Vec<T>; 5] {
    std::array::from_fn(|_| vec![T::zero(); n])
}

fn step_into<T: Real>(
    model: &SystemModel<T>,
    x: &mut [T],
    u: &[T],
    substeps: usize,
    buf: &mut [Vec<T>; 5],
) -> Result<(), RolloutError> {
    if substeps == 0 {
        return Err(RolloutError::Substeps);
    }
    let h = model.sampling_time() / T::lit(substeps as f64);
    for s in 0..substeps {
        rk4_substep(model, x, u, h, buf).map_err(|source| RolloutError::Model { stage: 0, source })?;
        if !all_finite(x) {
            return Err(RolloutError::Divergence { stage: 0, substep: s });
        }
    }
    Ok(())
}

/// One sampling interval of classical RK4 with `substeps` equal substeps.
pub fn step<T: Real>(
    model: &SystemModel<T>,
    x: &[T],
    u: &[T],
    substeps: usize,
) -> Result<Vec<T>, RolloutError> {
    let mut out = x.to_vec();
    step_into(model, &mut out, u, substeps, &mut scratch(x.len()))?;
    Ok(out)
}

/// Applies `useq` from `x`, returning `φ(0) = x, …, φ(N)`.
pub fn rollout<T: Real>(
    model: &SystemModel<T>,
    x: &[T],
    useq: &InputSequence<T>,
    substeps: usize,
) -> Result<StateTrajectory<T>, RolloutError> {
    let n = x.len();
    let horizon = useq.horizon();
    let mut data = Vec::with_capacity(n * (horizon + 1));
    data.extend_from_slice(x);
    let mut cur = x.to_vec();
    let mut buf = scratch(n);
    for (k, u) in useq.stages().enumerate() {
        step_into(model, &mut cur, u, substeps, &mut buf).map_err(|e| e.at_stage(k))?;
        data.extend_from_slice(&cur);
    }
    Ok(StateTrajectory { n_x: n, data })
}

/// Discrete map in shifted coordinates with the model's default substeps.
pub fn step_shifted<T: Real>(
    model: &SystemModel<T>,
    x: &[T],
    u: &[T],
) -> Result<Vec<T>, RolloutError> {
    let xo = model.from_shifted_state(x);
    let uo = model.from_shifted_input(u);
    let next = step(model, &xo, &uo, model.substeps())?;
    Ok(model.to_shifted_state(&next))
}

/// Rollout in shifted coordinates; requires `useq` to span the model horizon.
pub fn rollout_shifted<T: Real>(
    model: &SystemModel<T>,
    x: &[T],
    useq: &InputSequence<T>,
) -> Result<StateTrajectory<T>, RolloutError> {
    if useq.horizon() != model.horizon() {
        return Err(RolloutError::Horizon { expected: model.horizon(), got: useq.horizon() });
    }
    let n = x.len();
    let (x_e, u_e) = (model.x_e(), model.u_e());
    let mut data = Vec::with_capacity(n * (useq.horizon() + 1));
    data.extend_from_slice(x);
    // Same arithmetic as `step_shifted`, without its per-stage allocations.
    let mut xo = vec![T::zero(); n];
    let mut uo = vec![T::zero(); useq.n_u()];
    let mut buf = scratch(n);
    for (k, u) in useq.stages().enumerate() {
        let cur = &data[k * n..];
        for i in 0..n {
            xo[i] = cur[i] + x_e[i];
        }
        for (j, v) in u.iter().enumerate() {
            uo[j] = *v + u_e[j];
        }
        step_into(model, &mut xo, &uo, model.substeps(), &mut buf).map_err(|e| e.at_stage(k))?;
        data.extend(xo.iter().zip(x_e).map(|(a, b)| *a - *b));
    }
    Ok(StateTrajectory { n_x: n, data })
}

/// Discrete-time Jacobians of one step, `A = ∂x⁺/∂x` and `B = ∂x⁺/∂u`.
#[derive(Debug, Clone)]
pub struct StepJacobian<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

/// One RK4 step together with its exact forward-mode sensitivities.
pub fn step_with_jacobian<T: Real>(
    model: &SystemModel<T>,
    x: &[T],
    u: &[T],
    substeps: usize,
) -> Result<(Vec<T>, StepJacobian<T>), RolloutError> {
    if substeps == 0 {
        return Err(RolloutError::Substeps);
    }
    let (n, m) = (model.n_x(), model.n_u());
    let w = n + m;
    let field = model.field();
    let h = model.sampling_time() / T::lit(substeps as f64);
    let half = h * T::lit(0.5);
    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    let model_err = |source| RolloutError::Model { stage: 0, source };

    let mut xc = x.to_vec();
    // sens = d x_current / d [x0, u]
    let mut sens = Matrix::zeros(n, w);
    for i in 0..n {
        sens[(i, i)] = T::one();
    }
    let mut ja = Matrix::zeros(n, n);
    let mut jb = Matrix::zeros(n, m);
    let mut k = [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]];
    let mut dk: [Matrix<T>; 4] = std::array::from_fn(|_| Matrix::zeros(n, w));
    let mut xs = vec![T::zero(); n];
    let coef = [T::zero(), half, half, h];

    for s in 0..substeps {
        for stage in 0..4 {
            let ds = if stage == 0 {
                xs.copy_from_slice(&xc);
                sens.clone()
            } else {
                let c = coef[stage];
                for i in 0..n {
                    xs[i] = xc[i] + c * k[stage - 1][i];
                }
                sens.add(&dk[stage - 1].scale(c))
            };
            field.eval(&xs, u, &mut k[stage]).map_err(model_err)?;
            field.jacobian(&xs, u, &mut ja, &mut jb).map_err(model_err)?;
            let mut d = ja.matmul(&ds);
            for i in 0..n {
                for j in 0..m {
                    d[(i, n + j)] += jb[(i, j)];
                }
            }
            dk[stage] = d;
        }
        for i in 0..n {
            xc[i] += sixth * (k[0][i] + two * k[1][i] + two * k[2][i] + k[3][i]);
        }
        let incr = dk[0].add(&dk[1].scale(two)).add(&dk[2].scale(two)).add(&dk[3]).scale(sixth);
        sens = sens.add(&incr);
        if !all_finite(&xc) {
            return Err(RolloutError::Divergence { stage: 0, substep: s });
        }
    }
    let mut a = Matrix::zeros(n, n);
    let mut b = Matrix::zeros(n, m);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = sens[(i, j)];
        }
        for j in 0..m {
            b[(i, j)] = sens[(i, n + j)];
        }
    }
    Ok((xc, StepJacobian { a, b }))
}

/// Shifted rollout with per-stage discrete Jacobians.
pub fn rollout_with_jacobians<T: Real>(
    model: &SystemModel<T>,
    x: &[T],
    useq: &InputSequence<T>,
) -> Result<(StateTrajectory<T>, Vec<StepJacobian<T>>), RolloutError> {
    if useq.horizon() != model.horizon() {
        return Err(RolloutError::Horizon { expected: model.horizon(), got: useq.horizon() });
    }
    let n = x.len();
    let mut data = Vec::with_capacity(n * (useq.horizon() + 1));
    data.extend_from_slice(x);
    let mut jac = Vec::with_capacity(useq.horizon());
    let mut cur = model.from_shifted_state(x);
    for (k, u) in useq.stages().enumerate() {
        let uo = model.from_shifted_input(u);
        let (next, j) =
            step_with_jacobian(model, &cur, &uo, model.substeps()).map_err(|e| e.at_stage(k))?;
        cur = next;
        data.extend_from_slice(&model.to_shifted_state(&cur));
        jac.push(j);
    }
    Ok((StateTrajectory { n_x: n, data }, jac))
}
