//! Constraint sets, cost, terminal ingredients and the feasibility checks.
//!
//! Everything here is expressed in shifted coordinates. A sequence is
//! feasible from `x` when every input lies in `U`, the predicted states
//! `φ(0) … φ(N−1)` lie in `X` and `φ(N)` lies in the terminal ellipsoid.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::linalg::{LinalgError, Matrix, MatrixDoc};
use crate::models::SystemModel;
use crate::rollout::{rollout_shifted, InputSequence, RolloutError, StateTrajectory};
use crate::scalar::{dot, norm1, Real};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("{0}")]
    Shape(String),
    #[error("{what} is not positive definite: {source}")]
    NotPositiveDefinite { what: &'static str, source: LinalgError },
    #[error("{0} contains non-finite entries")]
    NonFinite(&'static str),
    #[error("terminal radius must be positive, got {0}")]
    Radius(f64),
    #[error("tightened check requested but the problem has no tightening")]
    NoTightening,
    #[error("invalid tightening: {0}")]
    Tightening(String),
    #[error("spec file: {0}")]
    Format(String),
}

/// `{v : L v ≤ 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope<T> {
    l: Matrix<T>,
}

impl<T: Real> Polytope<T> {
    pub fn new(l: Matrix<T>) -> Result<Self, OcpError> {
        if !l.is_finite() {
            return Err(OcpError::NonFinite("constraint matrix"));
        }
        Ok(Self { l })
    }

    /// The whole space.
    pub fn unconstrained(dim: usize) -> Self {
        Self { l: Matrix::zeros(0, dim) }
    }

    /// Box `lower ≤ v ≤ upper`; infinite bounds produce no row. The origin
    /// must be strictly inside.
    pub fn from_box(lower: &[T], upper: &[T]) -> Result<Self, OcpError> {
        if lower.len() != upper.len() {
            return Err(OcpError::Shape(format!("box bounds of length {} and {}", lower.len(), upper.len())));
        }
        let dim = lower.len();
        let mut rows = Vec::new();
        for i in 0..dim {
            if !(lower[i] < T::zero() && upper[i] > T::zero()) {
                return Err(OcpError::Shape(format!(
                    "box coordinate {i}: [{}, {}] does not contain 0 strictly",
                    lower[i], upper[i]
                )));
            }
            if upper[i].is_finite() {
                let mut r = vec![T::zero(); dim];
                r[i] = T::one() / upper[i];
                rows.push(r);
            }
            if lower[i].is_finite() {
                let mut r = vec![T::zero(); dim];
                r[i] = T::one() / lower[i];
                rows.push(r);
            }
        }
        let l = if rows.is_empty() { Matrix::zeros(0, dim) } else { Matrix::from_rows(&rows).expect("rectangular") };
        Ok(Self { l })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.l
    }

    pub fn n_rows(&self) -> usize {
        self.l.rows()
    }

    pub fn dim(&self) -> usize {
        self.l.cols()
    }

    pub fn row(&self, j: usize) -> &[T] {
        self.l.row(j)
    }

    /// `L_j v`
    pub fn value(&self, j: usize, v: &[T]) -> T {
        dot(self.l.row(j), v)
    }

    pub fn row_norm1(&self, j: usize) -> T {
        norm1(self.l.row(j))
    }

    /// Largest `L_j v − 1` over rows (−1 for the unconstrained set).
    pub fn max_excess(&self, v: &[T]) -> T {
        (0..self.n_rows()).fold(-T::one(), |m, j| m.max(self.value(j, v) - T::one()))
    }

    pub fn contains(&self, v: &[T], tol: T) -> bool {
        (0..self.n_rows()).all(|j| self.value(j, v) <= T::one() + tol)
    }

    /// The set `factor · {v | Lv ≤ 1}` for `factor > 0`.
    pub fn scaled(&self, factor: T) -> Self {
        Self { l: self.l.scale(T::one() / factor) }
    }

    /// Per-coordinate bounds implied by the single-coordinate rows.
    pub fn box_bounds(&self) -> (Vec<T>, Vec<T>) {
        let n = self.dim();
        let mut lo = vec![T::neg_infinity(); n];
        let mut hi = vec![T::infinity(); n];
        for j in 0..self.n_rows() {
            let row = self.l.row(j);
            let mut nz = row.iter().enumerate().filter(|(_, a)| **a != T::zero());
            if let (Some((i, a)), None) = (nz.next(), nz.next()) {
                let bound = T::one() / *a;
                if *a > T::zero() {
                    hi[i] = hi[i].min(bound);
                } else {
                    lo[i] = lo[i].max(bound);
                }
            }
        }
        (lo, hi)
    }

    /// True when every row constrains a single coordinate.
    pub fn is_box(&self) -> bool {
        (0..self.n_rows()).all(|j| self.l.row(j).iter().filter(|a| **a != T::zero()).count() <= 1)
    }

    /// Projects `v` onto the box part of the set; returns whether anything moved.
    pub fn clamp_box(&self, v: &mut [T]) -> bool {
        let (lo, hi) = self.box_bounds();
        let mut moved = false;
        for i in 0..v.len() {
            let c = v[i].max(lo[i]).min(hi[i]);
            if c != v[i] {
                v[i] = c;
                moved = true;
            }
        }
        moved
    }

    pub fn cast<U: Real>(&self) -> Polytope<U> {
        Polytope { l: self.l.cast() }
    }
}

/// Terminal cost `xᵀPx`, feedback `K x` and set `{‖P^½x‖ ≤ α}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients<T> {
    pub p: Matrix<T>,
    pub k: Matrix<T>,
    pub alpha: T,
}

impl<T: Real> TerminalIngredients<T> {
    pub fn new(p: Matrix<T>, k: Matrix<T>, alpha: T) -> Result<Self, OcpError> {
        let t = Self { p, k, alpha };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        let n = self.p.rows();
        if self.p.cols() != n || self.k.cols() != n {
            return Err(OcpError::Shape(format!(
                "terminal P is {:?} and K is {:?}",
                self.p.shape(),
                self.k.shape()
            )));
        }
        if !self.p.is_finite() || !self.k.is_finite() {
            return Err(OcpError::NonFinite("terminal ingredients"));
        }
        if self.p.sub(&self.p.transpose()).max_abs() > T::lit(1e-9) * (T::one() + self.p.max_abs()) {
            return Err(OcpError::Shape("terminal P is not symmetric".into()));
        }
        self.p
            .cholesky()
            .map_err(|source| OcpError::NotPositiveDefinite { what: "terminal P", source })?;
        if !(self.alpha > T::zero()) || !self.alpha.is_finite() {
            return Err(OcpError::Radius(self.alpha.to_f64_lossy()));
        }
        Ok(())
    }

    /// `xᵀ P x`
    pub fn cost(&self, x: &[T]) -> T {
        self.p.quad_form(x)
    }

    /// `‖P^½ x‖`
    pub fn radius(&self, x: &[T]) -> T {
        self.cost(x).max(T::zero()).sqrt()
    }

    pub fn contains(&self, x: &[T], alpha: T, tol: T) -> bool {
        self.radius(x) / alpha <= T::one() + tol
    }

    /// `K x` in shifted coordinates.
    pub fn feedback(&self, x: &[T]) -> Vec<T> {
        self.k.mul_vec(x)
    }

    pub fn cast<U: Real>(&self) -> TerminalIngredients<U> {
        TerminalIngredients { p: self.p.cast(), k: self.k.cast(), alpha: U::lit(self.alpha.to_f64_lossy()) }
    }
}

/// Constraint tightening for the robust problem.
#[derive(Debug, Clone, PartialEq)]
pub enum Tightening<T> {
    None,
    /// Disturbance `‖d‖∞ ≤ eps` on the inputs propagated through the
    /// Lipschitz constant `l_f`; `eps_tilde` bounds the one-step effect.
    Lipschitz { l_f: T, eps: T, eps_tilde: T },
    /// Scalar tube `ṡ = −ρ s + w̄`, state rows tightened by `c_j s`.
    Tube {
        rho: T,
        wbar: T,
        c: Vec<T>,
        /// Optional input-row factors; without them inputs are not tightened.
        c_input: Option<Vec<T>>,
        k_delta: Option<Matrix<T>>,
        alpha_bar: T,
    },
}

impl<T: Real> Tightening<T> {
    pub fn is_none(&self) -> bool {
        matches!(self, Self::None)
    }

    /// Exact exponential-hold discretization of the tube, `s_0 … s_{n−1}`.
    pub fn tube_sizes(rho: T, wbar: T, ts: T, n: usize) -> Vec<T> {
        let a = (-rho * ts).exp();
        let gain = (T::one() - a) * wbar / rho;
        let mut s = Vec::with_capacity(n);
        let mut cur = T::zero();
        for _ in 0..n {
            s.push(cur);
            cur = a * cur + gain;
        }
        s
    }
}

/// `c_k = Σ_{i<k} L_f^i` for `k = 0 … count−1`.
pub fn lipschitz_factors<T: Real>(l_f: T, count: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(count);
    let mut c = T::zero();
    let mut pow = T::one();
    for _ in 0..count {
        out.push(c);
        c += pow;
        pow *= l_f;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Input,
    State,
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub stage: usize,
    pub row: usize,
    /// Constraint value minus its bound; for the terminal set `‖P^½x‖/α − 1`.
    pub margin: f64,
}

/// Which constraint classes were violated anywhere along the horizon.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationKinds {
    pub input: bool,
    pub state: bool,
    pub terminal: bool,
}

impl ViolationKinds {
    fn mark(&mut self, kind: ViolationKind) {
        match kind {
            ViolationKind::Input => self.input = true,
            ViolationKind::State => self.state = true,
            ViolationKind::Terminal => self.terminal = true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub first_violation: Option<Violation>,
    pub kinds: ViolationKinds,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.first_violation.is_none()
    }

    fn push(&mut self, v: Violation) {
        self.kinds.mark(v.kind);
        if self.first_violation.is_none() {
            self.first_violation = Some(v);
        }
    }
}

/// Rollout, feasibility verdict and cost from a single pass.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub trajectory: Option<StateTrajectory<T>>,
    pub report: FeasibilityReport,
    /// `None` when the rollout diverged.
    pub cost: Option<T>,
}

/// The finite-horizon problem: weights, sets, terminal ingredients and an
/// optional tightening.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSpec<T> {
    q: Matrix<T>,
    r: Matrix<T>,
    state_set: Polytope<T>,
    input_set: Polytope<T>,
    terminal: TerminalIngredients<T>,
    tightening: Tightening<T>,
    horizon: usize,
    tol_feas: T,
    p_lambda_max: T,
}

pub const DEFAULT_TOL_FEAS: f64 = 1e-8;

impl<T: Real> OcpSpec<T> {
    pub fn new(
        q: Matrix<T>,
        r: Matrix<T>,
        state_set: Polytope<T>,
        input_set: Polytope<T>,
        terminal: TerminalIngredients<T>,
        horizon: usize,
    ) -> Result<Self, OcpError> {
        let n_x = q.rows();
        let n_u = r.rows();
        if q.cols() != n_x || r.cols() != n_u {
            return Err(OcpError::Shape("Q and R must be square".into()));
        }
        if state_set.dim() != n_x || input_set.dim() != n_u {
            return Err(OcpError::Shape(format!(
                "state set has dimension {}, input set {}, for n_x = {n_x}, n_u = {n_u}",
                state_set.dim(),
                input_set.dim()
            )));
        }
        if terminal.p.rows() != n_x || terminal.k.rows() != n_u {
            return Err(OcpError::Shape("terminal ingredients do not match Q and R".into()));
        }
        if horizon == 0 {
            return Err(OcpError::Shape("horizon must be at least 1".into()));
        }
        if !q.is_finite() || !r.is_finite() {
            return Err(OcpError::NonFinite("cost weights"));
        }
        let q = q.symmetrize();
        let r = r.symmetrize();
        if q.symmetric_eigenvalues()[0] < -T::lit(1e-12) * (T::one() + q.max_abs()) {
            return Err(OcpError::Shape("Q must be positive semidefinite".into()));
        }
        r.cholesky().map_err(|source| OcpError::NotPositiveDefinite { what: "R", source })?;
        terminal.validate()?;
        let p_lambda_max = *terminal.p.symmetric_eigenvalues().last().expect("non-empty");
        Ok(Self {
            q,
            r,
            state_set,
            input_set,
            terminal,
            tightening: Tightening::None,
            horizon,
            tol_feas: T::lit(DEFAULT_TOL_FEAS),
            p_lambda_max,
        })
    }

    pub fn with_tightening(mut self, tightening: Tightening<T>) -> Result<Self, OcpError> {
        match &tightening {
            Tightening::None => {}
            Tightening::Lipschitz { l_f, eps, eps_tilde } => {
                if !(*l_f >= T::zero() && *eps >= T::zero() && *eps_tilde >= T::zero()) {
                    return Err(OcpError::Tightening("L_f, eps and eps_tilde must be nonnegative".into()));
                }
            }
            Tightening::Tube { rho, wbar, c, c_input, k_delta, alpha_bar } => {
                if !(*rho > T::zero()) || !(*wbar >= T::zero()) {
                    return Err(OcpError::Tightening("rho must be positive and wbar nonnegative".into()));
                }
                if c.len() != self.state_set.n_rows() || c.iter().any(|v| !(*v >= T::zero())) {
                    return Err(OcpError::Tightening(format!(
                        "need {} nonnegative state-row factors, got {}",
                        self.state_set.n_rows(),
                        c.len()
                    )));
                }
                if let Some(ci) = c_input {
                    if ci.len() != self.input_set.n_rows() || ci.iter().any(|v| !(*v >= T::zero())) {
                        return Err(OcpError::Tightening("input-row factors do not match the input set".into()));
                    }
                }
                if let Some(k) = k_delta {
                    if k.shape() != (self.n_u(), self.n_x()) {
                        return Err(OcpError::Tightening("K_delta has the wrong shape".into()));
                    }
                }
                if !(*alpha_bar > T::zero()) {
                    return Err(OcpError::Tightening("alpha_bar must be positive".into()));
                }
            }
        }
        self.tightening = tightening;
        Ok(self)
    }

    pub fn with_terminal(mut self, terminal: TerminalIngredients<T>) -> Result<Self, OcpError> {
        terminal.validate()?;
        if terminal.p.rows() != self.n_x() || terminal.k.rows() != self.n_u() {
            return Err(OcpError::Shape("terminal ingredients do not match Q and R".into()));
        }
        self.p_lambda_max = *terminal.p.symmetric_eigenvalues().last().expect("non-empty");
        self.terminal = terminal;
        Ok(self)
    }

    pub fn with_tol_feas(mut self, tol: T) -> Self {
        self.tol_feas = tol;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self, OcpError> {
        if horizon == 0 {
            return Err(OcpError::Shape("horizon must be at least 1".into()));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn with_input_set(mut self, input_set: Polytope<T>) -> Result<Self, OcpError> {
        if input_set.dim() != self.n_u() {
            return Err(OcpError::Shape("input set dimension".into()));
        }
        self.input_set = input_set;
        Ok(self)
    }

    pub fn q(&self) -> &Matrix<T> {
        &self.q
    }

    pub fn r(&self) -> &Matrix<T> {
        &self.r
    }

    pub fn state_set(&self) -> &Polytope<T> {
        &self.state_set
    }

    pub fn input_set(&self) -> &Polytope<T> {
        &self.input_set
    }

    pub fn terminal(&self) -> &TerminalIngredients<T> {
        &self.terminal
    }

    pub fn tightening(&self) -> &Tightening<T> {
        &self.tightening
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn tol_feas(&self) -> T {
        self.tol_feas
    }

    pub fn n_x(&self) -> usize {
        self.q.rows()
    }

    pub fn n_u(&self) -> usize {
        self.r.rows()
    }

    /// Lower bound `ℓ(x,u) ≥ α_ℓ ‖x‖²`, the smallest eigenvalue of `Q`.
    pub fn alpha_ell(&self) -> T {
        self.q.symmetric_eigenvalues()[0].max(T::zero())
    }

    /// `xᵀQx + uᵀRu`
    pub fn stage_cost(&self, x: &[T], u: &[T]) -> T {
        self.q.quad_form(x) + self.r.quad_form(u)
    }

    pub fn terminal_cost(&self, x: &[T]) -> T {
        self.terminal.cost(x)
    }

    pub fn trajectory_cost(&self, traj: &StateTrajectory<T>, useq: &InputSequence<T>) -> T {
        let mut v = T::zero();
        for (k, u) in useq.stages().enumerate() {
            v += self.stage_cost(traj.state(k), u);
        }
        v + self.terminal_cost(traj.last())
    }

    pub fn total_cost(
        &self,
        model: &SystemModel<T>,
        x: &[T],
        useq: &InputSequence<T>,
    ) -> Result<T, RolloutError> {
        let traj = rollout_shifted(model, x, useq)?;
        Ok(self.trajectory_cost(&traj, useq))
    }

    /// Radius of the tightened terminal set.
    pub fn tightened_alpha(&self) -> Result<T, OcpError> {
        match &self.tightening {
            Tightening::None => Err(OcpError::NoTightening),
            Tightening::Lipschitz { l_f, eps_tilde, .. } => {
                let c_n = *lipschitz_factors(*l_f, self.horizon + 1).last().expect("non-empty");
                let shrink = c_n * *eps_tilde * self.p_lambda_max.sqrt() * T::lit(self.n_x() as f64).sqrt();
                Ok(self.terminal.alpha - shrink)
            }
            Tightening::Tube { alpha_bar, .. } => Ok(*alpha_bar),
        }
    }

    /// Row bounds `b_j(k)` so that the tightened check is `L_j v ≤ b_j(k)`.
    fn bounds(&self, robust: bool, ts: T) -> Result<StageBounds<T>, OcpError> {
        let n = self.horizon;
        let ones = |rows: usize| vec![vec![T::one(); rows]; n];
        let mut b = StageBounds {
            input: ones(self.input_set.n_rows()),
            state: ones(self.state_set.n_rows()),
            alpha: self.terminal.alpha,
        };
        if !robust {
            return Ok(b);
        }
        match &self.tightening {
            Tightening::None => return Err(OcpError::NoTightening),
            Tightening::Lipschitz { l_f, eps, eps_tilde } => {
                let c = lipschitz_factors(*l_f, n);
                for k in 0..n {
                    for j in 0..self.input_set.n_rows() {
                        b.input[k][j] -= *eps * self.input_set.row_norm1(j);
                    }
                    for j in 0..self.state_set.n_rows() {
                        b.state[k][j] -= c[k] * *eps_tilde * self.state_set.row_norm1(j);
                    }
                }
            }
            Tightening::Tube { rho, wbar, c, c_input, .. } => {
                let s = Tightening::tube_sizes(*rho, *wbar, ts, n);
                for k in 0..n {
                    for j in 0..self.state_set.n_rows() {
                        b.state[k][j] -= c[j] * s[k];
                    }
                    if let Some(ci) = c_input {
                        for j in 0..self.input_set.n_rows() {
                            b.input[k][j] -= ci[j] * s[k];
                        }
                    }
                }
            }
        }
        b.alpha = self.tightened_alpha()?;
        Ok(b)
    }

    fn check_with(
        &self,
        traj: &StateTrajectory<T>,
        useq: &InputSequence<T>,
        b: &StageBounds<T>,
        stop_at_first: bool,
    ) -> FeasibilityReport {
        let tol = self.tol_feas;
        let mut rep = FeasibilityReport { first_violation: None, kinds: ViolationKinds::default() };
        let n = useq.horizon();
        for k in 0..n {
            let u = useq.stage(k);
            for j in 0..self.input_set.n_rows() {
                let v = self.input_set.value(j, u);
                if !(v <= b.input[k][j] + tol) {
                    rep.push(violation(ViolationKind::Input, k, j, v - b.input[k][j]));
                    if stop_at_first {
                        return rep;
                    }
                }
            }
            let x = traj.state(k);
            for j in 0..self.state_set.n_rows() {
                let v = self.state_set.value(j, x);
                if !(v <= b.state[k][j] + tol) {
                    rep.push(violation(ViolationKind::State, k, j, v - b.state[k][j]));
                    if stop_at_first {
                        return rep;
                    }
                }
            }
        }
        let ratio = if b.alpha > T::zero() { self.terminal.radius(traj.last()) / b.alpha } else { T::infinity() };
        if !(ratio <= T::one() + tol) {
            rep.push(violation(ViolationKind::Terminal, n, 0, ratio - T::one()));
        }
        rep
    }

    fn evaluate_with(
        &self,
        model: &SystemModel<T>,
        x: &[T],
        useq: &InputSequence<T>,
        b: &StageBounds<T>,
        stop_at_first: bool,
    ) -> Evaluation<T> {
        match rollout_shifted(model, x, useq) {
            Ok(traj) => {
                let report = self.check_with(&traj, useq, b, stop_at_first);
                let cost = Some(self.trajectory_cost(&traj, useq));
                Evaluation { trajectory: Some(traj), report, cost }
            }
            Err(e) => Evaluation { trajectory: None, report: diverged(e, useq.horizon()), cost: None },
        }
    }

    /// Nominal check against `U^N(x)`, reporting every violated class.
    ///
    /// A diverging rollout is reported as a state violation one stage after
    /// the failing step (terminal if that is stage `N`), with infinite margin.
    pub fn evaluate(&self, model: &SystemModel<T>, x: &[T], useq: &InputSequence<T>) -> Evaluation<T> {
        let b = self.bounds(false, model.sampling_time()).expect("nominal bounds");
        self.evaluate_with(model, x, useq, &b, false)
    }

    pub fn check_feasible(&self, model: &SystemModel<T>, x: &[T], useq: &InputSequence<T>) -> FeasibilityReport {
        self.evaluate(model, x, useq).report
    }

    pub fn check_trajectory(&self, traj: &StateTrajectory<T>, useq: &InputSequence<T>, robust: bool, ts: T) -> Result<FeasibilityReport, OcpError> {
        let b = self.bounds(robust, ts)?;
        Ok(self.check_with(traj, useq, &b, false))
    }

    /// Check against the tightened set `Ū^N(x)`.
    pub fn check_feasible_tightened(
        &self,
        model: &SystemModel<T>,
        x: &[T],
        useq: &InputSequence<T>,
    ) -> Result<FeasibilityReport, OcpError> {
        let b = self.bounds(true, model.sampling_time())?;
        Ok(self.evaluate_with(model, x, useq, &b, false).report)
    }

    /// Tightened or nominal check by flag.
    pub fn check(
        &self,
        model: &SystemModel<T>,
        x: &[T],
        useq: &InputSequence<T>,
        tightened: bool,
    ) -> Result<FeasibilityReport, OcpError> {
        if tightened {
            self.check_feasible_tightened(model, x, useq)
        } else {
            Ok(self.check_feasible(model, x, useq))
        }
    }

    /// Row bounds used by the solver for stage `k` of the chosen problem.
    pub fn constraint_bounds(&self, tightened: bool, ts: T) -> Result<StageBounds<T>, OcpError> {
        self.bounds(tightened, ts)
    }

    /// Whether `(x, u)` satisfies `X × U` at tolerance `tol_feas`.
    pub fn state_input_ok(&self, x: &[T], u: &[T]) -> (bool, bool) {
        (self.state_set.contains(x, self.tol_feas), self.input_set.contains(u, self.tol_feas))
    }

    pub fn cast<U: Real>(&self) -> OcpSpec<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        let cv = |v: &Vec<T>| v.iter().map(|x| c(*x)).collect::<Vec<U>>();
        OcpSpec {
            q: self.q.cast(),
            r: self.r.cast(),
            state_set: self.state_set.cast(),
            input_set: self.input_set.cast(),
            terminal: self.terminal.cast(),
            tightening: match &self.tightening {
                Tightening::None => Tightening::None,
                Tightening::Lipschitz { l_f, eps, eps_tilde } => {
                    Tightening::Lipschitz { l_f: c(*l_f), eps: c(*eps), eps_tilde: c(*eps_tilde) }
                }
                Tightening::Tube { rho, wbar, c: cj, c_input, k_delta, alpha_bar } => Tightening::Tube {
                    rho: c(*rho),
                    wbar: c(*wbar),
                    c: cv(cj),
                    c_input: c_input.as_ref().map(cv),
                    k_delta: k_delta.as_ref().map(|k| k.cast()),
                    alpha_bar: c(*alpha_bar),
                },
            },
            horizon: self.horizon,
            tol_feas: c(self.tol_feas),
            p_lambda_max: c(self.p_lambda_max),
        }
    }

    pub fn to_doc(&self) -> OcpSpecDoc {
        let f = |v: T| v.to_f64_lossy();
        let fv = |v: &[T]| v.iter().map(|x| f(*x)).collect::<Vec<f64>>();
        OcpSpecDoc {
            q: MatrixDoc::from_matrix(&self.q),
            r: MatrixDoc::from_matrix(&self.r),
            state_set: MatrixDoc::from_matrix(self.state_set.matrix()),
            input_set: MatrixDoc::from_matrix(self.input_set.matrix()),
            terminal: TerminalDoc {
                p_f: MatrixDoc::from_matrix(&self.terminal.p),
                k_f: MatrixDoc::from_matrix(&self.terminal.k),
                alpha: f(self.terminal.alpha),
            },
            tightening: match &self.tightening {
                Tightening::None => TighteningDoc::None,
                Tightening::Lipschitz { l_f, eps, eps_tilde } => {
                    TighteningDoc::Lipschitz { l_f: f(*l_f), eps: f(*eps), eps_tilde: f(*eps_tilde) }
                }
                Tightening::Tube { rho, wbar, c, c_input, k_delta, alpha_bar } => TighteningDoc::Tube {
                    rho: f(*rho),
                    wbar: f(*wbar),
                    c: fv(c),
                    c_input: c_input.as_ref().map(|v| fv(v)),
                    k_delta: k_delta.as_ref().map(MatrixDoc::from_matrix),
                    alpha_bar: f(*alpha_bar),
                },
            },
            horizon: self.horizon,
            tol_feas: f(self.tol_feas),
        }
    }

    pub fn from_doc(doc: &OcpSpecDoc) -> Result<Self, OcpError> {
        let m = |d: &MatrixDoc, cols: usize, what: &str| {
            d.to_matrix::<T>(cols).map_err(|e| OcpError::Format(format!("{what}: {e}")))
        };
        let q = m(&doc.q, 0, "Q")?;
        let r = m(&doc.r, 0, "R")?;
        let (n_x, n_u) = (q.rows(), r.rows());
        let terminal = TerminalIngredients::new(
            m(&doc.terminal.p_f, n_x, "terminal.P_f")?,
            m(&doc.terminal.k_f, n_x, "terminal.K_f")?,
            T::lit(doc.terminal.alpha),
        )?;
        let spec = Self::new(
            q,
            r,
            Polytope::new(m(&doc.state_set, n_x, "state_set")?)?,
            Polytope::new(m(&doc.input_set, n_u, "input_set")?)?,
            terminal,
            doc.horizon,
        )?
        .with_tol_feas(T::lit(doc.tol_feas));
        let v = |x: &[f64]| x.iter().map(|a| T::lit(*a)).collect::<Vec<T>>();
        let tightening = match &doc.tightening {
            TighteningDoc::None => Tightening::None,
            TighteningDoc::Lipschitz { l_f, eps, eps_tilde } => {
                Tightening::Lipschitz { l_f: T::lit(*l_f), eps: T::lit(*eps), eps_tilde: T::lit(*eps_tilde) }
            }
            TighteningDoc::Tube { rho, wbar, c, c_input, k_delta, alpha_bar } => Tightening::Tube {
                rho: T::lit(*rho),
                wbar: T::lit(*wbar),
                c: v(c),
                c_input: c_input.as_deref().map(v),
                k_delta: k_delta.as_ref().map(|k| m(k, n_x, "tightening.K_delta")).transpose()?,
                alpha_bar: T::lit(*alpha_bar),
            },
        };
        spec.with_tightening(tightening)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, OcpError> {
        let doc: OcpSpecDoc = serde_json::from_str(text).map_err(|e| OcpError::Format(e.to_string()))?;
        Self::from_doc(&doc)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(&self.to_doc()).expect("spec serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Right-hand sides of the (possibly tightened) constraint rows per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageBounds<T> {
    pub input: Vec<Vec<T>>,
    pub state: Vec<Vec<T>>,
    pub alpha: T,
}

fn violation<T: Real>(kind: ViolationKind, stage: usize, row: usize, margin: T) -> Violation {
    Violation { kind, stage, row, margin: margin.to_f64_lossy() }
}

fn diverged(e: RolloutError, horizon: usize) -> FeasibilityReport {
    let stage = match e {
        RolloutError::Divergence { stage, .. } | RolloutError::Model { stage, .. } => stage + 1,
        _ => 0,
    };
    let kind = if stage >= horizon { ViolationKind::Terminal } else { ViolationKind::State };
    let mut rep = FeasibilityReport { first_violation: None, kinds: ViolationKinds::default() };
    rep.push(Violation { kind, stage: stage.min(horizon), row: 0, margin: f64::INFINITY });
    rep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalDoc {
    #[serde(rename = "P_f")]
    pub p_f: MatrixDoc,
    #[serde(rename = "K_f")]
    pub k_f: MatrixDoc,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum TighteningDoc {
    None,
    Lipschitz {
        #[serde(rename = "L_f")]
        l_f: f64,
        eps: f64,
        eps_tilde: f64,
    },
    Tube {
        rho: f64,
        wbar: f64,
        c: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c_input: Option<Vec<f64>>,
        #[serde(rename = "K_delta", default, skip_serializing_if = "Option::is_none")]
        k_delta: Option<MatrixDoc>,
        alpha_bar: f64,
    },
}

/// JSON form of [`OcpSpec`]; matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpSpecDoc {
    #[serde(rename = "Q")]
    pub q: MatrixDoc,
    #[serde(rename = "R")]
    pub r: MatrixDoc,
    pub state_set: MatrixDoc,
    pub input_set: MatrixDoc,
    pub terminal: TerminalDoc,
    #[serde(default = "no_tightening")]
    pub tightening: TighteningDoc,
    #[serde(rename = "N")]
    pub horizon: usize,
    #[serde(default = "default_tol")]
    pub tol_feas: f64,
}

fn no_tightening() -> TighteningDoc {
    TighteningDoc::None
}

fn default_tol() -> f64 {
    DEFAULT_TOL_FEAS
}
