//! Sampled Lipschitz constants for the Lipschitz-based tightening and the
//! ε-perturbation probe of tightened solutions.
//!
//! All estimates are sample maxima and therefore lower bounds on the true
//! constants; they are stamped into outputs so downstream results can be
//! reproduced.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::models::{stream_rng, SystemModel};
use crate::ocp::{FeasibilityReport, OcpSpec};
use crate::rollout::{step_shifted, step_with_jacobian, InputSequence};
use crate::scalar::{norm_inf, Real};

use super::sqp::{solve_ocp, SolveError, SolveOptions, SolveStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Sampled `sup ‖∂f/∂x‖∞` over `X × U`.
    pub l_f: f64,
    pub eps: f64,
    /// Sampled `max ‖f(x, u + d) − f(x, u)‖∞` over `‖d‖∞ ≤ eps`.
    pub eps_tilde: f64,
    pub top_l_f: Vec<f64>,
    pub top_eps_tilde: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

fn push_top(top: &mut Vec<f64>, v: f64) {
    top.push(v);
    top.sort_by(|a, b| b.total_cmp(a));
    top.truncate(3);
}

/// Sampling region: the state box intersected with the model's sample box,
/// and the input box (unbounded coordinates fall back to ±1).
pub fn sampling_region<T: Real>(model: &SystemModel<T>, spec: &OcpSpec<T>) -> (Vec<(T, T)>, Vec<(T, T)>) {
    let (slo, shi) = spec.state_set().box_bounds();
    let sb = model.sample_box();
    let xs = (0..model.n_x()).map(|i| (slo[i].max(sb.lower[i]), shi[i].min(sb.upper[i]))).collect();
    let (ulo, uhi) = spec.input_set().box_bounds();
    let us = (0..model.n_u())
        .map(|i| {
            let lo = if ulo[i].is_finite() { ulo[i] } else { -T::one() };
            let hi = if uhi[i].is_finite() { uhi[i] } else { T::one() };
            (lo, hi)
        })
        .collect();
    (xs, us)
}

/// Latin-hypercube design over the given box, one row per sample.
pub fn latin_hypercube<T: Real>(bounds: &[(T, T)], n: usize, seed: u64, stream: u64) -> Vec<Vec<T>> {
    let mut rng = stream_rng(seed, stream);
    let mut out = vec![vec![T::zero(); bounds.len()]; n];
    for (d, (lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, s) in strata.into_iter().enumerate() {
            let r: f64 = (s as f64 + rng.gen::<f64>()) / n as f64;
            out[i][d] = *lo + (*hi - *lo) * T::lit(r);
        }
    }
    out
}

pub fn estimate_lipschitz<T: Real>(
    model: &SystemModel<T>,
    spec: &OcpSpec<T>,
    eps: T,
    n_samples: usize,
    seed: u64,
) -> LipschitzEstimate {
    let (xs, us) = sampling_region(model, spec);
    let mut bounds = xs;
    bounds.extend(us);
    let design = latin_hypercube(&bounds, n_samples.max(1), seed, 0);
    let (nx, nu) = (model.n_x(), model.n_u());
    let mut l_f = 0.0f64;
    let mut eps_tilde = 0.0f64;
    let mut top_l = Vec::new();
    let mut top_e = Vec::new();
    for row in &design {
        let (x, u) = row.split_at(nx);
        let xo = model.from_shifted_state(x);
        let uo = model.from_shifted_input(u);
        let Ok((_, jac)) = step_with_jacobian(model, &xo, &uo, model.substeps()) else { continue };
        let induced = (0..nx)
            .map(|r| jac.a.row(r).iter().fold(T::zero(), |s, v| s + v.abs()))
            .fold(T::zero(), |m, v| m.max(v))
            .to_f64_lossy();
        l_f = l_f.max(induced);
        push_top(&mut top_l, induced);
        if eps > T::zero() {
            let Ok(base) = step_shifted(model, x, u) else { continue };
            let mut worst = T::zero();
            for corner in 0..(1usize << nu) {
                let up: Vec<T> = (0..nu)
                    .map(|i| if corner >> i & 1 == 1 { u[i] + eps } else { u[i] - eps })
                    .collect();
                if let Ok(next) = step_shifted(model, x, &up) {
                    let diff: Vec<T> = next.iter().zip(&base).map(|(a, b)| *a - *b).collect();
                    worst = worst.max(norm_inf(&diff));
                }
            }
            let w = worst.to_f64_lossy();
            eps_tilde = eps_tilde.max(w);
            push_top(&mut top_e, w);
        }
    }
    LipschitzEstimate {
        l_f,
        eps: eps.to_f64_lossy(),
        eps_tilde,
        top_l_f: top_l,
        top_eps_tilde: top_e,
        n_samples,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationFailure {
    pub perturbation: Vec<f64>,
    pub report: FeasibilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub passed: bool,
    pub perturbations: usize,
    pub failures: Vec<PerturbationFailure>,
    pub solve_status: SolveStatus,
    pub tightened: bool,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("no {which} solution at the probed state (status {status:?})")]
    NoSolution { which: &'static str, status: SolveStatus },
}

/// Perturbs the robust solution at `x0` by `n_trials` uniform draws from the
/// ε-box plus every signed single-coordinate extreme and the two all-sign
/// corners, and checks each perturbed sequence against the nominal set.
///
/// When `spec` carries no tightening the nominal solution is probed.
pub fn lemma1_probe<T: Real>(
    model: &SystemModel<T>,
    spec: &OcpSpec<T>,
    x0: &[T],
    eps: T,
    n_trials: usize,
    seed: u64,
    options: &SolveOptions<T>,
) -> Result<Lemma1Report, ProbeError> {
    let tightened = !spec.tightening().is_none();
    let sol = solve_ocp(model, spec, x0, options, tightened)?;
    if sol.status == SolveStatus::Infeasible {
        return Err(ProbeError::NoSolution { which: if tightened { "tightened" } else { "nominal" }, status: sol.status });
    }
    Ok(probe_sequence(model, spec, x0, &sol.useq, eps, n_trials, seed, sol.status, tightened))
}

#[allow(clippy::too_many_arguments)]
pub fn probe_sequence<T: Real>(
    model: &SystemModel<T>,
    spec: &OcpSpec<T>,
    x0: &[T],
    base: &InputSequence<T>,
    eps: T,
    n_trials: usize,
    seed: u64,
    solve_status: SolveStatus,
    tightened: bool,
) -> Lemma1Report {
    let len = base.as_slice().len();
    let mut perturbations: Vec<Vec<T>> = Vec::with_capacity(n_trials + 2 * len + 2);
    for t in 0..n_trials {
        let mut rng = stream_rng(seed, t as u64);
        perturbations.push((0..len).map(|_| eps * T::lit(rng.gen_range(-1.0..=1.0))).collect());
    }
    for i in 0..len {
        for sign in [T::one(), -T::one()] {
            let mut d = vec![T::zero(); len];
            d[i] = sign * eps;
            perturbations.push(d);
        }
    }
    perturbations.push(vec![eps; len]);
    perturbations.push(vec![-eps; len]);
    let mut failures = Vec::new();
    for d in &perturbations {
        let data: Vec<T> = base.as_slice().iter().zip(d).map(|(u, e)| *u + *e).collect();
        let useq = InputSequence::new(base.n_u(), data);
        let report = spec.check_feasible(model, x0, &useq);
        if !report.feasible() {
            failures.push(PerturbationFailure { perturbation: d.iter().map(|v| v.to_f64_lossy()).collect(), report });
        }
    }
    Lemma1Report { passed: failures.is_empty(), perturbations: perturbations.len(), failures, solve_status, tightened }
}
