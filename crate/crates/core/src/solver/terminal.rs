//! Terminal cost, controller and set from the linearization at the origin,
//! with a sampled certificate of invariance, Lyapunov decrease and input
//! admissibility.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{Cholesky, LinalgError, Matrix};
use crate::models::{stream_rng, SystemModel};
use crate::ocp::{OcpError, Polytope, TerminalIngredients};
use crate::rollout::{step_shifted, step_with_jacobian};
use crate::scalar::{dot, Real};

use super::riccati::{lqr_gain, solve_dare, RiccatiError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TerminalError {
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("linearization failed: {0}")]
    Linearization(String),
    #[error("terminal radius collapsed below {min} (last tried {last})")]
    Collapse { min: f64, last: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSynthOptions<T> {
    /// Weights are inflated by this factor in the Riccati equation, leaving
    /// `(γ − 1) ℓ` of decrease to absorb the nonlinearity.
    pub gamma: T,
    pub n_check: usize,
    pub seed: u64,
    pub margin: T,
    pub alpha_min: T,
    /// Share of samples drawn inside the ellipsoid instead of on its boundary.
    pub interior_fraction: f64,
}

impl<T: Real> Default for TerminalSynthOptions<T> {
    fn default() -> Self {
        Self {
            gamma: T::lit(2.0),
            n_check: 2000,
            seed: 0x7e41,
            margin: T::lit(1e-6),
            alpha_min: T::lit(1e-6),
            interior_fraction: 0.5,
        }
    }
}

/// Outcome of the sampled check; every count is a number of failing samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub samples: usize,
    pub invariance_failures: usize,
    pub decrease_failures: usize,
    pub input_failures: usize,
    pub rollout_failures: usize,
    pub contained_in_state_set: bool,
    /// Largest `‖P^½ f(x, Kx)‖ / α` seen.
    pub worst_invariance: f64,
    /// Largest `(V_f(f) − V_f(x) + ℓ) / V_f(x)` seen.
    pub worst_decrease: f64,
    /// Largest input-row value seen.
    pub worst_input: f64,
}

impl Certificate {
    pub fn passed(&self) -> bool {
        self.invariance_failures == 0
            && self.decrease_failures == 0
            && self.input_failures == 0
            && self.rollout_failures == 0
            && self.contained_in_state_set
    }
}

/// Discrete Jacobians of the shifted map at the origin.
pub fn linearize_at_origin<T: Real>(model: &SystemModel<T>) -> Result<(Matrix<T>, Matrix<T>), TerminalError> {
    let (_, j) = step_with_jacobian(model, model.x_e(), model.u_e(), model.substeps())
        .map_err(|e| TerminalError::Linearization(e.to_string()))?;
    Ok((j.a, j.b))
}

/// Largest radius for which the ellipsoid `{xᵀPx ≤ α²}` satisfies every row
/// of `set` after mapping through `map` (`L_j · map · x ≤ bound`).
fn support_radius<T: Real>(chol: &Cholesky<T>, set: &Polytope<T>, map: Option<&Matrix<T>>, bound: T) -> T {
    let mut alpha = T::infinity();
    for j in 0..set.n_rows() {
        let dir = match map {
            Some(k) => k.tr_mul_vec(set.row(j)),
            None => set.row(j).to_vec(),
        };
        let w = chol.solve_lower(&dir);
        let norm = dot(&w, &w).sqrt();
        if norm > T::zero() {
            alpha = alpha.min(bound / norm);
        }
    }
    alpha
}

struct Samples<T> {
    /// Unit-radius points `L⁻ᵀ z / ‖z‖` scaled by their radius fraction.
    points: Vec<Vec<T>>,
}

fn draw_samples<T: Real>(chol: &Cholesky<T>, n: usize, count: usize, seed: u64, interior_fraction: f64) -> Samples<T> {
    let n_interior = ((count as f64) * interior_fraction).round() as usize;
    let points = (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let frac = if i < count - n_interior.min(count) {
                1.0
            } else {
                use rand::Rng;
                rng.gen::<f64>().powf(1.0 / n as f64)
            };
            let dir: Vec<T> = z.iter().map(|v| T::lit(v / norm * frac)).collect();
            chol.solve_upper(&dir)
        })
        .collect();
    Samples { points }
}

struct Check<'a, T: Real> {
    model: &'a SystemModel<T>,
    q: &'a Matrix<T>,
    r: &'a Matrix<T>,
    state_set: &'a Polytope<T>,
    input_set: &'a Polytope<T>,
    p: &'a Matrix<T>,
    k: &'a Matrix<T>,
    margin: T,
}

impl<T: Real> Check<'_, T> {
    fn run(&self, alpha: T, samples: &Samples<T>, chol: &Cholesky<T>, stop_early: bool) -> Certificate {
        let one = T::one();
        let mut c = Certificate {
            samples: samples.points.len(),
            invariance_failures: 0,
            decrease_failures: 0,
            input_failures: 0,
            rollout_failures: 0,
            contained_in_state_set: support_radius(chol, self.state_set, None, one) >= alpha,
            worst_invariance: 0.0,
            worst_decrease: f64::NEG_INFINITY,
            worst_input: f64::NEG_INFINITY,
        };
        for unit in &samples.points {
            let x: Vec<T> = unit.iter().map(|v| *v * alpha).collect();
            let u = self.k.mul_vec(&x);
            for j in 0..self.input_set.n_rows() {
                let val = self.input_set.value(j, &u);
                c.worst_input = c.worst_input.max(val.to_f64_lossy());
                if val > one - self.margin {
                    c.input_failures += 1;
                    break;
                }
            }
            let vf = self.p.quad_form(&x);
            match step_shifted(self.model, &x, &u) {
                Ok(next) => {
                    let vn = self.p.quad_form(&next);
                    let ratio = vn.max(T::zero()).sqrt() / alpha;
                    c.worst_invariance = c.worst_invariance.max(ratio.to_f64_lossy());
                    if ratio > one - self.margin {
                        c.invariance_failures += 1;
                    }
                    let ell = self.q.quad_form(&x) + self.r.quad_form(&u);
                    let slack = vn - vf + ell;
                    if vf > T::zero() {
                        c.worst_decrease = c.worst_decrease.max((slack / vf).to_f64_lossy());
                    }
                    if slack > -self.margin * vf {
                        c.decrease_failures += 1;
                    }
                }
                Err(_) => c.rollout_failures += 1,
            }
            if stop_early && !c.passed() {
                break;
            }
        }
        c
    }
}

/// Sampled certificate for given ingredients with fresh samples.
pub fn verify_terminal<T: Real>(
    model: &SystemModel<T>,
    q: &Matrix<T>,
    r: &Matrix<T>,
    state_set: &Polytope<T>,
    input_set: &Polytope<T>,
    terminal: &TerminalIngredients<T>,
    n_samples: usize,
    seed: u64,
    margin: T,
    interior_fraction: f64,
) -> Result<Certificate, TerminalError> {
    let chol = terminal.p.cholesky()?;
    let samples = draw_samples(&chol, model.n_x(), n_samples, seed, interior_fraction);
    let check = Check { model, q, r, state_set, input_set, p: &terminal.p, k: &terminal.k, margin };
    Ok(check.run(terminal.alpha, &samples, &chol, false))
}

/// Riccati terminal ingredients with the largest sampled-certified radius.
pub fn synth_terminal<T: Real>(
    model: &SystemModel<T>,
    q: &Matrix<T>,
    r: &Matrix<T>,
    state_set: &Polytope<T>,
    input_set: &Polytope<T>,
    options: &TerminalSynthOptions<T>,
) -> Result<TerminalIngredients<T>, TerminalError> {
    let (a, b) = linearize_at_origin(model)?;
    let qg = q.scale(options.gamma);
    let rg = r.scale(options.gamma);
    let p = solve_dare(&a, &b, &qg, &rg, T::lit(1e-13), 200)?.symmetrize();
    let k = lqr_gain(&a, &b, &p, &rg)?;
    let chol = p.cholesky()?;
    let one = T::one();
    let alpha_cap = support_radius(&chol, state_set, None, one)
        .min(support_radius(&chol, input_set, Some(&k), one - options.margin));
    let alpha_cap = if alpha_cap.is_finite() { alpha_cap } else { T::lit(1e3) };
    let samples = draw_samples(&chol, model.n_x(), options.n_check, options.seed, options.interior_fraction);
    let check = Check { model, q, r, state_set, input_set, p: &p, k: &k, margin: options.margin };
    let ok = |alpha: T| check.run(alpha, &samples, &chol, true).passed();

    let mut alpha = if ok(alpha_cap) {
        alpha_cap
    } else {
        let (mut lo, mut hi) = (options.alpha_min, alpha_cap);
        if !ok(lo) {
            return Err(TerminalError::Collapse { min: options.alpha_min.to_f64_lossy(), last: lo.to_f64_lossy() });
        }
        for _ in 0..60 {
            let mid = (lo * hi).sqrt();
            if ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi / lo < T::lit(1.001) {
                break;
            }
        }
        // Back away from the sampled limit so unsampled directions also pass.
        lo * T::lit(0.9)
    };
    // Re-verify on an independent sample set and shrink until it passes.
    let fresh = draw_samples(&chol, model.n_x(), options.n_check, options.seed ^ 0x5eed_f00d, options.interior_fraction);
    let mut tries = 0;
    while !check.run(alpha, &fresh, &chol, true).passed() {
        alpha *= T::lit(0.9);
        tries += 1;
        if alpha < options.alpha_min || tries > 100 {
            return Err(TerminalError::Collapse { min: options.alpha_min.to_f64_lossy(), last: alpha.to_f64_lossy() });
        }
    }
    Ok(TerminalIngredients::new(p, k, alpha)?)
}
