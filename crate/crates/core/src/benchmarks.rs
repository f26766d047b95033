//! Cost weights, constraint sets and disturbance bounds of the three
//! benchmark problems, in shifted coordinates.

use crate::linalg::Matrix;
use crate::models::{BenchmarkId, ModelError, SystemModel};
use crate::ocp::{OcpError, OcpSpec, Polytope, TerminalIngredients, Tightening};
use crate::scalar::Real;
use crate::linalg::LinalgError;
use crate::solver::terminal::linearize_at_origin;
use crate::solver::{synth_terminal, TerminalError, TerminalSynthOptions};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BenchmarkError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("tube: {0}")]
    Tube(String),
    #[error("model has no benchmark id")]
    NotABenchmark,
}

/// Input-disturbance bound `ε` used for the robust problem.
pub fn disturbance_bound(id: BenchmarkId) -> f64 {
    match id {
        BenchmarkId::StirTank => 1e-4,
        BenchmarkId::Quadcopter | BenchmarkId::ChainMass { .. } => 5e-3,
    }
}

pub fn weights<T: Real>(id: BenchmarkId) -> (Matrix<T>, Matrix<T>) {
    let d = |v: &[f64]| Matrix::from_diag(&v.iter().map(|x| T::lit(*x)).collect::<Vec<_>>());
    match id {
        BenchmarkId::StirTank => (Matrix::identity(2), d(&[1e-5])),
        BenchmarkId::Quadcopter => {
            let mut q = vec![20.0; 3];
            q.extend([1.0; 3]);
            q.extend([0.01; 4]);
            (d(&q), d(&[8.0, 8.0, 0.8]))
        }
        BenchmarkId::ChainMass { masses } => {
            let free = 3 * (masses - 2);
            let mut q = vec![1.0; free];
            q.extend([25.0; 3]);
            q.extend(vec![1.0; free]);
            (d(&q), Matrix::identity(3))
        }
    }
}

fn single_rows<T: Real>(dim: usize, rows: &[(usize, f64)]) -> Polytope<T> {
    let data: Vec<Vec<T>> = rows
        .iter()
        .map(|(i, a)| {
            let mut r = vec![T::zero(); dim];
            r[*i] = T::lit(*a);
            r
        })
        .collect();
    if data.is_empty() {
        return Polytope::unconstrained(dim);
    }
    Polytope::new(Matrix::from_rows(&data).expect("rectangular")).expect("finite rows")
}

/// State and input polytopes `(X, U)` about the model's equilibrium.
pub fn constraint_sets<T: Real>(model: &SystemModel<T>) -> Result<(Polytope<T>, Polytope<T>), BenchmarkError> {
    let id = model.benchmark_id().ok_or(BenchmarkError::NotABenchmark)?;
    let u_e = model.u_e();
    match id {
        BenchmarkId::StirTank => {
            let h = T::lit(0.2);
            let x = Polytope::from_box(&[-h, -h], &[h, h])?;
            let u = Polytope::from_box(&[-u_e[0]], &[T::lit(2.0) - u_e[0]])?;
            Ok((x, u))
        }
        BenchmarkId::Quadcopter => {
            let tilt = std::f64::consts::PI / 9.0;
            let x = single_rows(10, &[(0, 1.0 / 0.145), (6, 1.0 / tilt), (6, -1.0 / tilt), (8, 1.0 / tilt), (8, -1.0 / tilt)]);
            // Free-fall acceleration read off the model so parameter overrides stay consistent.
            let g = -model.dynamics(model.x_e(), &[T::zero(); 3])?[5];
            let quarter = T::FRAC_PI_4();
            let u = Polytope::from_box(
                &[-quarter, -quarter, -u_e[2]],
                &[quarter, quarter, T::lit(2.0) * g - u_e[2]],
            )?;
            Ok((x, u))
        }
        BenchmarkId::ChainMass { masses } => {
            let x_e = model.x_e();
            let rows: Vec<(usize, f64)> =
                (0..masses - 1).map(|j| 3 * j + 1).map(|i| (i, -1.0 / (0.1 + x_e[i].to_f64_lossy()))).collect();
            let x = single_rows(model.n_x(), &rows);
            let one = T::one();
            let u = Polytope::from_box(&[-one; 3], &[one; 3])?;
            Ok((x, u))
        }
    }
}

/// Nominal problem with synthesized terminal ingredients.
pub fn nominal_spec<T: Real>(
    model: &SystemModel<T>,
    options: &TerminalSynthOptions<T>,
) -> Result<OcpSpec<T>, BenchmarkError> {
    let id = model.benchmark_id().ok_or(BenchmarkError::NotABenchmark)?;
    let (q, r) = weights::<T>(id);
    let (x, u) = constraint_sets(model)?;
    let terminal = synth_terminal(model, &q, &r, &x, &u, options)?;
    Ok(OcpSpec::new(q, r, x, u, terminal, model.horizon())?)
}

/// Nominal problem with terminal ingredients supplied by the caller.
pub fn spec_with_terminal<T: Real>(
    model: &SystemModel<T>,
    terminal: TerminalIngredients<T>,
) -> Result<OcpSpec<T>, BenchmarkError> {
    let id = model.benchmark_id().ok_or(BenchmarkError::NotABenchmark)?;
    let (q, r) = weights::<T>(id);
    let (x, u) = constraint_sets(model)?;
    Ok(OcpSpec::new(q, r, x, u, terminal, model.horizon())?)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn spectral_norm(m: &Matrix<f64>) -> f64 {
    m.transpose().matmul(m).symmetric_eigenvalues().last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// Tube tightening built from the linearization at the target, measured in
/// the terminal weight's norm `‖·‖_P`.
///
/// The contraction rate is that of `A + B K_f` in `‖·‖_P`, `w̄` matches the
/// stationary tube size of the one-step effect of an input disturbance
/// `‖d‖∞ ≤ eps`, `c_j = ‖P^{-½}L_j‖`, and the terminal radius shrinks by the
/// final tube size. The result is a desk-scale surrogate, not a certified
/// robust design.
pub fn tube_tightening(model: &SystemModel<f64>, spec: &OcpSpec<f64>, eps: f64) -> Result<Tightening<f64>, BenchmarkError> {
    let (a, b) = linearize_at_origin(model)?;
    let term = spec.terminal();
    let chol = term
        .p
        .cholesky()
        .map_err(|source| OcpError::NotPositiveDefinite { what: "P", source })?;
    let n = model.n_x();
    let a_k = a.add(&b.matmul(&term.k));
    let mut cols = Vec::with_capacity(n);
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        cols.push(chol.upper_mul(&a_k.mul_vec(&chol.solve_upper(&e))));
    }
    let contraction = spectral_norm(&Matrix::from_rows(&cols)?.transpose());
    if !(contraction < 1.0) {
        return Err(BenchmarkError::Tube(format!("closed loop is not contractive in the P norm ({contraction})")));
    }
    let b_cols: Vec<Vec<f64>> = (0..model.n_u()).map(|j| chol.upper_mul(&b.col(j))).collect();
    let per_step = spectral_norm(&Matrix::from_rows(&b_cols)?.transpose()) * eps * (model.n_u() as f64).sqrt();
    let ts = model.sampling_time();
    let rho = -contraction.ln() / ts;
    let wbar = rho * per_step / (1.0 - contraction);
    let c = (0..spec.state_set().n_rows()).map(|j| norm2(&chol.solve_lower(spec.state_set().row(j)))).collect();
    let c_input = (0..spec.input_set().n_rows())
        .map(|j| norm2(&chol.solve_lower(&term.k.tr_mul_vec(spec.input_set().row(j)))))
        .collect();
    let s_n = *Tightening::tube_sizes(rho, wbar, ts, spec.horizon() + 1).last().expect("non-empty");
    let alpha_bar = term.alpha - s_n;
    if !(alpha_bar > 0.0) {
        return Err(BenchmarkError::Tube(format!("tube of size {s_n:e} exceeds the terminal radius {}", term.alpha)));
    }
    Ok(Tightening::Tube { rho, wbar, c, c_input: Some(c_input), k_delta: Some(term.k.clone()), alpha_bar })
}
