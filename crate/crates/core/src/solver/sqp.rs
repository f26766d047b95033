//! Single-shooting SQP for the finite-horizon problem.
//!
//! The decision variable is the stacked input perturbation `v`, with
//! `u_k = K_δ φ_k + v_k` when prestabilization is active and `u_k = v_k`
//! otherwise. Every iteration linearizes the rollout with exact RK4
//! sensitivities, solves an elastic Gauss–Newton QP and backtracks on an
//! ℓ1 merit function. The best iterate that satisfies every constraint row
//! is returned.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::models::SystemModel;
use crate::ocp::{OcpError, OcpSpec};
use crate::rollout::{step_shifted, step_with_jacobian, InputSequence, RolloutError};
use crate::scalar::{dot, norm_inf, Real};

use super::qp::{solve_qp, QpError};

#[derive(Debug, Clone, PartialEq)]
pub enum Init<T> {
    /// Forward simulation of the terminal controller, clipped into the input box.
    TerminalControllerRollout,
    WarmStart(InputSequence<T>),
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prestabilize<T> {
    None,
    /// Use the terminal gain `K_f` as `K_δ`.
    TerminalGain,
    Gain(Matrix<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions<T> {
    pub max_sqp_iters: usize,
    pub qp_reg: T,
    pub tol_kkt: T,
    pub tol_con: T,
    pub init: Init<T>,
    pub prestabilize: Prestabilize<T>,
    /// Margin subtracted from every row bound so returned solutions are
    /// strictly inside the feasible set.
    pub backoff: T,
    pub max_qp_iters: usize,
}

impl<T: Real> Default for SolveOptions<T> {
    fn default() -> Self {
        Self {
            max_sqp_iters: 100,
            qp_reg: T::lit(1e-9),
            tol_kkt: T::lit(1e-7),
            tol_con: T::lit(1e-9),
            init: Init::TerminalControllerRollout,
            prestabilize: Prestabilize::TerminalGain,
            backoff: T::lit(1e-7),
            max_qp_iters: 2000,
        }
    }
}

impl<T: Real> SolveOptions<T> {
    pub fn with_init(mut self, init: Init<T>) -> Self {
        self.init = init;
        self
    }

    pub fn with_max_iters(mut self, iters: usize) -> Self {
        self.max_sqp_iters = iters;
        self
    }
}

/// JSON form of [`SolveOptions`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub max_sqp_iters: usize,
    pub qp_reg: f64,
    pub tol_kkt: f64,
    pub tol_con: f64,
    /// `terminal_controller` or `zeros`.
    pub init: String,
    /// `none` or `terminal_gain`.
    pub prestabilize: String,
    pub backoff: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        let d = SolveOptions::<f64>::default();
        Self {
            max_sqp_iters: d.max_sqp_iters,
            qp_reg: d.qp_reg,
            tol_kkt: d.tol_kkt,
            tol_con: d.tol_con,
            init: "terminal_controller".into(),
            prestabilize: "terminal_gain".into(),
            backoff: d.backoff,
        }
    }
}

impl SolveConfig {
    pub fn to_options<T: Real>(&self) -> Result<SolveOptions<T>, SolveError> {
        let init = match self.init.as_str() {
            "terminal_controller" => Init::TerminalControllerRollout,
            "zeros" => Init::Zeros,
            other => return Err(SolveError::Options(format!("unknown init '{other}'"))),
        };
        let prestabilize = match self.prestabilize.as_str() {
            "none" => Prestabilize::None,
            "terminal_gain" => Prestabilize::TerminalGain,
            other => return Err(SolveError::Options(format!("unknown prestabilize '{other}'"))),
        };
        let o = SolveOptions {
            max_sqp_iters: self.max_sqp_iters,
            qp_reg: T::lit(self.qp_reg),
            tol_kkt: T::lit(self.tol_kkt),
            tol_con: T::lit(self.tol_con),
            init,
            prestabilize,
            backoff: T::lit(self.backoff),
            max_qp_iters: SolveOptions::<T>::default().max_qp_iters,
        };
        o.validate()?;
        Ok(o)
    }
}

impl<T: Real> SolveOptions<T> {
    pub fn validate(&self) -> Result<(), SolveError> {
        if self.max_sqp_iters == 0 {
            return Err(SolveError::Options("max_sqp_iters must be at least 1".into()));
        }
        if !(self.tol_kkt > T::zero() && self.tol_con > T::zero() && self.qp_reg >= T::zero()) {
            return Err(SolveError::Options("tolerances must be positive".into()));
        }
        if !(self.backoff >= T::zero()) {
            return Err(SolveError::Options("backoff must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid solver options: {0}")]
    Options(String),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error("initial state has dimension {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("initial state is not finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIters,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SolveResult<T> {
    pub status: SolveStatus,
    pub useq: InputSequence<T>,
    pub cost: T,
    pub iters: usize,
    pub kkt_residual: T,
}

impl<T: Real> SolveResult<T> {
    pub fn feasible(&self) -> bool {
        self.status != SolveStatus::Infeasible
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RowKind {
    Input { stage: usize, row: usize },
    State { stage: usize, row: usize },
    Terminal,
}

struct Point<T> {
    v: Vec<T>,
    states: Vec<Vec<T>>,
    inputs: Vec<Vec<T>>,
    values: Vec<T>,
    cost: T,
}

struct Linearization<T> {
    grad: Vec<T>,
    hess: Matrix<T>,
    rows: Matrix<T>,
}

struct Problem<'a, T: Real> {
    model: &'a SystemModel<T>,
    spec: &'a OcpSpec<T>,
    x0: &'a [T],
    k: Option<Matrix<T>>,
    kinds: Vec<RowKind>,
    /// Row bounds used for incumbency (true bounds).
    limit: Vec<T>,
    /// Row bounds targeted by the QP (backed off).
    target: Vec<T>,
}

impl<'a, T: Real> Problem<'a, T> {
    fn n_v(&self) -> usize {
        self.spec.horizon() * self.model.n_u()
    }

    fn input_at(&self, phi: &[T], v: &[T]) -> Vec<T> {
        match &self.k {
            Some(k) => {
                let mut u = k.mul_vec(phi);
                for (a, b) in u.iter_mut().zip(v) {
                    *a += *b;
                }
                u
            }
            None => v.to_vec(),
        }
    }

    fn row_values(&self, states: &[Vec<T>], inputs: &[Vec<T>]) -> Vec<T> {
        let n = self.spec.horizon();
        self.kinds
            .iter()
            .map(|kind| match *kind {
                RowKind::Input { stage, row } => self.spec.input_set().value(row, &inputs[stage]),
                RowKind::State { stage, row } => self.spec.state_set().value(row, &states[stage]),
                RowKind::Terminal => self.spec.terminal().radius(&states[n]),
            })
            .collect()
    }

    fn cost(&self, states: &[Vec<T>], inputs: &[Vec<T>]) -> T {
        let mut c = T::zero();
        for (x, u) in states.iter().zip(inputs) {
            c += self.spec.stage_cost(x, u);
        }
        c + self.spec.terminal_cost(&states[self.spec.horizon()])
    }

    fn forward(&self, v: &[T]) -> Result<Point<T>, RolloutError> {
        let n = self.spec.horizon();
        let m = self.model.n_u();
        let mut states = Vec::with_capacity(n + 1);
        let mut inputs = Vec::with_capacity(n);
        let mut x = self.x0.to_vec();
        for k in 0..n {
            let u = self.input_at(&x, &v[k * m..(k + 1) * m]);
            let next = step_shifted(self.model, &x, &u).map_err(|e| match e {
                RolloutError::Divergence { substep, .. } => RolloutError::Divergence { stage: k, substep },
                other => other,
            })?;
            states.push(x);
            inputs.push(u);
            x = next;
        }
        states.push(x);
        let values = self.row_values(&states, &inputs);
        let cost = self.cost(&states, &inputs);
        Ok(Point { v: v.to_vec(), states, inputs, values, cost })
    }

    /// `lam_term` weights the curvature of the terminal radius row, which is
    /// convex in the state.
    fn linearize(&self, pt: &Point<T>, lam_term: T) -> Result<Linearization<T>, RolloutError> {
        let n = self.spec.horizon();
        let (nx, m) = (self.model.n_x(), self.model.n_u());
        let nv = self.n_v();
        let two = T::lit(2.0);
        let mut s = Matrix::zeros(nx, nv);
        let mut grad = vec![T::zero(); nv];
        let mut hess = Matrix::zeros(nv, nv);
        let mut rows = Matrix::zeros(self.kinds.len(), nv);
        let mut row_of_stage: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for (i, kind) in self.kinds.iter().enumerate() {
            match *kind {
                RowKind::Input { stage, .. } | RowKind::State { stage, .. } => row_of_stage[stage].push(i),
                RowKind::Terminal => row_of_stage[n].push(i),
            }
        }
        let q = self.spec.q();
        let r = self.spec.r();
        for k in 0..=n {
            let x = &pt.states[k];
            if k < n {
                let mut uj = match &self.k {
                    Some(kd) => kd.matmul(&s),
                    None => Matrix::zeros(m, nv),
                };
                for i in 0..m {
                    uj[(i, k * m + i)] += T::one();
                }
                let u = &pt.inputs[k];
                accumulate(&mut grad, &mut hess, &s, &q.mul_vec(x), q, two);
                accumulate(&mut grad, &mut hess, &uj, &r.mul_vec(u), r, two);
                for &i in &row_of_stage[k] {
                    match self.kinds[i] {
                        RowKind::Input { row, .. } => {
                            let g = uj.tr_mul_vec(self.spec.input_set().row(row));
                            rows.row_mut(i).copy_from_slice(&g);
                        }
                        RowKind::State { row, .. } => {
                            let g = s.tr_mul_vec(self.spec.state_set().row(row));
                            rows.row_mut(i).copy_from_slice(&g);
                        }
                        RowKind::Terminal => unreachable!(),
                    }
                }
                let xo = self.model.from_shifted_state(x);
                let uo = self.model.from_shifted_input(u);
                let (_, jac) = step_with_jacobian(self.model, &xo, &uo, self.model.substeps())?;
                s = jac.a.matmul(&s).add(&jac.b.matmul(&uj));
            } else {
                let p = &self.spec.terminal().p;
                let px = p.mul_vec(x);
                accumulate(&mut grad, &mut hess, &s, &px, p, two);
                for &i in &row_of_stage[n] {
                    let radius = pt.values[i];
                    if radius > T::zero() {
                        let g = s.tr_mul_vec(&px);
                        for (dst, src) in rows.row_mut(i).iter_mut().zip(g) {
                            *dst = src / radius;
                        }
                        if lam_term > T::zero() {
                            // ∇²‖x‖_P = P/r − (Px)(Px)ᵀ/r³
                            let r3 = radius * radius * radius;
                            let mut w = p.scale(T::one() / radius);
                            for a in 0..nx {
                                for b in 0..nx {
                                    w[(a, b)] -= px[a] * px[b] / r3;
                                }
                            }
                            let zero = vec![T::zero(); nx];
                            let mut dummy = vec![T::zero(); nv];
                            accumulate(&mut dummy, &mut hess, &s, &zero, &w, lam_term);
                        }
                    }
                }
            }
        }
        Ok(Linearization { grad, hess: hess.symmetrize(), rows })
    }

    fn violation(&self, values: &[T], bounds: &[T]) -> T {
        values.iter().zip(bounds).fold(T::zero(), |s, (g, b)| s + (*g - *b).max(T::zero()))
    }

    fn max_excess(&self, values: &[T], bounds: &[T]) -> T {
        values.iter().zip(bounds).fold(T::neg_infinity(), |s, (g, b)| s.max(*g - *b))
    }
}

/// `grad += 2 Jᵀ W x`, `hess += 2 Jᵀ W J`
fn accumulate<T: Real>(grad: &mut [T], hess: &mut Matrix<T>, j: &Matrix<T>, wx: &[T], w: &Matrix<T>, two: T) {
    let g = j.tr_mul_vec(wx);
    for (a, b) in grad.iter_mut().zip(g) {
        *a += two * b;
    }
    let wj = w.matmul(j);
    let nv = j.cols();
    for r in 0..j.rows() {
        let jr = j.row(r);
        let wjr = wj.row(r);
        for a in 0..nv {
            let ja = jr[a];
            if ja == T::zero() {
                continue;
            }
            let hrow = hess.row_mut(a);
            for b in 0..nv {
                hrow[b] += two * ja * wjr[b];
            }
        }
    }
}

fn initial_v<T: Real>(problem: &Problem<'_, T>, options: &SolveOptions<T>) -> Vec<T> {
    let model = problem.model;
    let spec = problem.spec;
    let n = spec.horizon();
    let m = model.n_u();
    let useq = match &options.init {
        Init::Zeros => InputSequence::zeros(m, n),
        Init::WarmStart(u) => u.clone(),
        Init::TerminalControllerRollout => terminal_controller_rollout(model, spec, problem.x0),
    };
    let Some(k) = &problem.k else { return useq.into_vec() };
    let mut v = Vec::with_capacity(n * m);
    let mut x = problem.x0.to_vec();
    for (stage, u) in useq.stages().enumerate() {
        let ku = k.mul_vec(&x);
        v.extend(u.iter().zip(&ku).map(|(a, b)| *a - *b));
        match step_shifted(model, &x, u) {
            Ok(next) => x = next,
            Err(_) => {
                v.extend(useq.as_slice()[(stage + 1) * m..].iter().copied());
                break;
            }
        }
    }
    v
}

/// `u_k = clip(K_f φ_k)` simulated forward; stops extending on divergence.
pub fn terminal_controller_rollout<T: Real>(
    model: &SystemModel<T>,
    spec: &OcpSpec<T>,
    x0: &[T],
) -> InputSequence<T> {
    let n = spec.horizon();
    let m = model.n_u();
    let mut data = Vec::with_capacity(n * m);
    let mut x = x0.to_vec();
    for _ in 0..n {
        let mut u = spec.terminal().feedback(&x);
        if !u.iter().all(|v| v.is_finite()) {
            u = vec![T::zero(); m];
        }
        spec.input_set().clamp_box(&mut u);
        match step_shifted(model, &x, &u) {
            Ok(next) => x = next,
            Err(_) => x = vec![T::zero(); x.len()],
        }
        data.extend(u);
    }
    InputSequence::new(m, data)
}

/// Solves the nominal (or tightened) problem from shifted state `x0`.
pub fn solve_ocp<T: Real>(
    model: &SystemModel<T>,
    spec: &OcpSpec<T>,
    x0: &[T],
    options: &SolveOptions<T>,
    tightened: bool,
) -> Result<SolveResult<T>, SolveError> {
    options.validate()?;
    if x0.len() != model.n_x() {
        return Err(SolveError::Dimension { expected: model.n_x(), got: x0.len() });
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(SolveError::NonFinite);
    }
    let n = spec.horizon();
    if model.horizon() != n {
        return Err(SolveError::Options(format!("model horizon {} differs from spec horizon {n}", model.horizon())));
    }
    let bounds = spec.constraint_bounds(tightened, model.sampling_time())?;
    let tol = spec.tol_feas();
    let infeasible = |iters| SolveResult {
        status: SolveStatus::Infeasible,
        useq: InputSequence::zeros(model.n_u(), n),
        cost: T::infinity(),
        iters,
        kkt_residual: T::infinity(),
    };
    for j in 0..spec.state_set().n_rows() {
        if spec.state_set().value(j, x0) > bounds.state[0][j] + tol {
            return Ok(infeasible(0));
        }
    }

    let mut kinds = Vec::new();
    let mut limit = Vec::new();
    for k in 0..n {
        for j in 0..spec.input_set().n_rows() {
            kinds.push(RowKind::Input { stage: k, row: j });
            limit.push(bounds.input[k][j]);
        }
        if k > 0 {
            for j in 0..spec.state_set().n_rows() {
                kinds.push(RowKind::State { stage: k, row: j });
                limit.push(bounds.state[k][j]);
            }
        }
    }
    kinds.push(RowKind::Terminal);
    limit.push(bounds.alpha);
    let target: Vec<T> = kinds
        .iter()
        .zip(&limit)
        .map(|(kind, b)| match kind {
            RowKind::Terminal => *b * (T::one() - options.backoff),
            _ => *b - options.backoff,
        })
        .collect();
    let k = match &options.prestabilize {
        Prestabilize::None => None,
        Prestabilize::TerminalGain => Some(spec.terminal().k.clone()),
        Prestabilize::Gain(g) => {
            if g.shape() != (model.n_u(), model.n_x()) {
                return Err(SolveError::Options("prestabilizing gain has the wrong shape".into()));
            }
            Some(g.clone())
        }
    };
    let problem = Problem { model, spec, x0, k, kinds, limit, target };
    Ok(run(&problem, options, tightened))
}

const STALL_WINDOW: usize = 8;

struct Incumbent<T> {
    useq: InputSequence<T>,
    cost: T,
}

fn useq_of<T: Real>(pt: &Point<T>, n_u: usize) -> InputSequence<T> {
    InputSequence::new(n_u, pt.inputs.concat())
}

fn run<T: Real>(problem: &Problem<'_, T>, options: &SolveOptions<T>, tightened: bool) -> SolveResult<T> {
    let spec = problem.spec;
    let model = problem.model;
    let m = model.n_u();
    let nv = problem.n_v();
    let mut best: Option<Incumbent<T>> = None;
    let consider = |best: &mut Option<Incumbent<T>>, pt: &Point<T>, check: bool| {
        if problem.max_excess(&pt.values, &problem.limit) > T::zero() && !check {
            return;
        }
        if best.as_ref().is_some_and(|b| b.cost <= pt.cost) {
            return;
        }
        let useq = useq_of(pt, m);
        if check {
            // The initializer counts as an incumbent whenever the checker accepts it.
            match spec.check(model, problem.x0, &useq, tightened) {
                Ok(rep) if rep.feasible() => {}
                _ => return,
            }
        }
        *best = Some(Incumbent { useq, cost: pt.cost });
    };

    let v0 = initial_v(problem, options);
    let mut pt = match problem.forward(&v0) {
        Ok(p) => p,
        Err(_) => match problem.forward(&vec![T::zero(); nv]) {
            Ok(p) => p,
            Err(_) => {
                return SolveResult {
                    status: SolveStatus::Infeasible,
                    useq: InputSequence::new(m, v0),
                    cost: T::infinity(),
                    iters: 0,
                    kkt_residual: T::infinity(),
                }
            }
        },
    };
    consider(&mut best, &pt, true);

    let mut mu = T::lit(10.0) * (T::one() + pt.cost);
    let mu_cap = mu * T::lit(1e8);
    let mut viol_hist: Vec<T> = Vec::new();
    let mut reg = options.qp_reg;
    let mut status = SolveStatus::MaxIters;
    let mut kkt = T::infinity();
    let mut iters = 0;
    let mut lam_term = T::zero();
    let armijo = T::lit(1e-4);
    let half = T::lit(0.5);

    while iters < options.max_sqp_iters {
        iters += 1;
        let lin = match problem.linearize(&pt, lam_term) {
            Ok(l) => l,
            Err(_) => break,
        };
        let elastic: Vec<usize> =
            (0..pt.values.len()).filter(|&i| pt.values[i] > problem.target[i]).collect();
        let Some((d, t, lambda_max, lam_t)) = solve_subproblem(problem, &pt.values, &lin, &elastic, mu, reg, options) else {
            reg = (reg * T::lit(100.0)).max(T::lit(1e-6));
            if reg > T::lit(1e6) {
                break;
            }
            continue;
        };
        mu = mu.max((T::lit(2.0) * lambda_max).min(T::lit(10.0) * mu)).min(mu_cap);
        lam_term = lam_t;
        let dnorm = norm_inf(&d);
        let hd = lin.hess.mul_vec(&d);
        kkt = norm_inf(&hd);
        let viol = problem.violation(&pt.values, &problem.target);
        let feasible_now = problem.max_excess(&pt.values, &problem.target) <= options.tol_con;
        if dnorm <= options.tol_kkt * (T::one() + norm_inf(&pt.v)) {
            if feasible_now {
                status = SolveStatus::Converged;
                break;
            }
        }
        viol_hist.push(viol);
        // Stalled violation: a local minimizer of infeasibility.
        if viol > options.tol_con && viol_hist.len() > STALL_WINDOW {
            let past = viol_hist[viol_hist.len() - 1 - STALL_WINDOW];
            if past - viol <= T::lit(1e-3) * past {
                break;
            }
        }
        let merit0 = pt.cost + mu * viol;
        let slack: T = t.iter().copied().sum();
        let deriv = dot(&lin.grad, &d) - mu * viol + mu * slack;
        let sufficient = |next: &Point<T>, a: T| {
            next.cost + mu * problem.violation(&next.values, &problem.target) <= merit0 + armijo * a * deriv.min(T::zero())
        };
        let mut a = T::one();
        let mut accepted = None;
        while a > T::lit(1e-10) {
            let trial: Vec<T> = pt.v.iter().zip(&d).map(|(v, dv)| *v + a * *dv).collect();
            if let Ok(next) = problem.forward(&trial) {
                if sufficient(&next, a) {
                    accepted = Some(next);
                    break;
                }
                if a == T::one() {
                    // Second-order correction against constraint curvature.
                    let gd = lin.rows.mul_vec(&d);
                    let shifted: Vec<T> = next.values.iter().zip(&gd).map(|(g, l)| *g - *l).collect();
                    if let Some((dc, ..)) = solve_subproblem(problem, &shifted, &lin, &elastic, mu, reg, options) {
                        let trial: Vec<T> = pt.v.iter().zip(&dc).map(|(v, dv)| *v + *dv).collect();
                        if let Ok(corrected) = problem.forward(&trial) {
                            if sufficient(&corrected, T::one()) {
                                accepted = Some(corrected);
                                break;
                            }
                        }
                    }
                }
            }
            a *= half;
        }
        match accepted {
            Some(next) => {
                if a == T::one() {
                    reg = (reg * T::lit(0.3)).max(options.qp_reg);
                } else if a < T::lit(0.1) {
                    reg = (reg * T::lit(10.0)).max(T::lit(1e-8));
                }
                let step_small = a * dnorm <= options.tol_kkt * (T::one() + norm_inf(&pt.v));
                pt = next;
                consider(&mut best, &pt, false);
                if step_small && problem.max_excess(&pt.values, &problem.target) <= options.tol_con {
                    status = SolveStatus::Converged;
                    break;
                }
            }
            None => {
                if feasible_now && dnorm <= T::lit(1e3) * options.tol_kkt * (T::one() + norm_inf(&pt.v)) {
                    status = SolveStatus::Converged;
                    break;
                }
                reg = (reg * T::lit(100.0)).max(T::lit(1e-6));
                if reg > T::lit(1e8) {
                    break;
                }
            }
        }
    }

    match best {
        Some(inc) => {
            let eval = spec.evaluate(model, problem.x0, &inc.useq);
            let ok = spec.check(model, problem.x0, &inc.useq, tightened).map(|r| r.feasible()).unwrap_or(false);
            if ok {
                SolveResult {
                    status,
                    cost: eval.cost.unwrap_or(inc.cost),
                    useq: inc.useq,
                    iters,
                    kkt_residual: kkt,
                }
            } else {
                SolveResult { status: SolveStatus::Infeasible, useq: inc.useq, cost: inc.cost, iters, kkt_residual: kkt }
            }
        }
        None => SolveResult {
            status: SolveStatus::Infeasible,
            useq: useq_of(&pt, m),
            cost: pt.cost,
            iters,
            kkt_residual: kkt,
        },
    }
}

/// Elastic QP in `(d, t)`; returns the step, the slacks, the largest
/// multiplier of a non-elastic row and the terminal-row multiplier.
fn solve_subproblem<T: Real>(
    problem: &Problem<'_, T>,
    values: &[T],
    lin: &Linearization<T>,
    elastic: &[usize],
    mu: T,
    reg: T,
    options: &SolveOptions<T>,
) -> Option<(Vec<T>, Vec<T>, T, T)> {
    let nv = lin.grad.len();
    let ne = elastic.len();
    let nz = nv + ne;
    let nrows = values.len();
    let scale = (0..nv).fold(T::zero(), |s, i| s.max(lin.hess[(i, i)].abs()));
    let mut h = Matrix::zeros(nz, nz);
    for i in 0..nv {
        h.row_mut(i)[..nv].copy_from_slice(lin.hess.row(i));
        h[(i, i)] += reg * (T::one() + scale) + T::lit(1e-12) * scale;
    }
    let slack_curv = T::lit(1e-8) * mu;
    for e in 0..ne {
        h[(nv + e, nv + e)] = slack_curv;
    }
    let mut g = lin.grad.clone();
    g.extend(std::iter::repeat(mu).take(ne));
    let mut a = Matrix::zeros(nrows + ne, nz);
    let mut b = Vec::with_capacity(nrows + ne);
    let mut slot = vec![usize::MAX; nrows];
    for (e, &i) in elastic.iter().enumerate() {
        slot[i] = e;
    }
    for i in 0..nrows {
        a.row_mut(i)[..nv].copy_from_slice(lin.rows.row(i));
        if slot[i] != usize::MAX {
            a[(i, nv + slot[i])] = -T::one();
        }
        b.push(problem.target[i] - values[i]);
    }
    for e in 0..ne {
        a[(nrows + e, nv + e)] = -T::one();
        b.push(T::zero());
    }
    let sol = match solve_qp(&h, &g, &a, &b, options.max_qp_iters) {
        Ok(s) => s,
        Err(QpError::NotConvex(_)) | Err(QpError::Infeasible { .. }) | Err(QpError::MaxIterations(_)) => return None,
        Err(QpError::Shape(msg)) => panic!("internal QP assembly: {msg}"),
    };
    let lambda_max = (0..nrows)
        .filter(|&i| slot[i] == usize::MAX)
        .fold(T::zero(), |s, i| s.max(sol.multipliers[i]));
    let d = sol.x[..nv].to_vec();
    let t = sol.x[nv..].iter().map(|v| v.max(T::zero())).collect();
    let lam_term = sol.multipliers[nrows - 1];
    Some((d, t, lambda_max, lam_term))
}
