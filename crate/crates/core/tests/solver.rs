use std::sync::Arc;

use safe_ampc::benchmarks::{constraint_sets, nominal_spec, weights};
use safe_ampc::linalg::Matrix;
use safe_ampc::models::{BenchmarkId, ModelError, SampleBox, SystemModel, VectorField};
use safe_ampc::ocp::{Polytope, Tightening};
use safe_ampc::rollout::{step_shifted, InputSequence};
use safe_ampc::solver::*;
use safe_ampc::solver::lipschitz::sampling_region;

fn stir() -> SystemModel<f64> {
    SystemModel::benchmark(BenchmarkId::StirTank).unwrap()
}

fn synth_opts() -> TerminalSynthOptions<f64> {
    TerminalSynthOptions::default()
}

#[test]
fn origin_is_optimal() {
    for id in [BenchmarkId::StirTank, BenchmarkId::Quadcopter] {
        let m = SystemModel::<f64>::benchmark(id).unwrap();
        let spec = nominal_spec(&m, &synth_opts()).unwrap();
        let r = solve_ocp(&m, &spec, &vec![0.0; m.n_x()], &SolveOptions::default(), false).unwrap();
        assert_eq!(r.status, SolveStatus::Converged, "{id}");
        assert!(r.cost <= 1e-8, "{id}: {}", r.cost);
        assert!(r.useq.as_slice().iter().all(|u| u.abs() < 1e-4));
    }
}

#[test]
fn never_worse_than_feasible_initializer() {
    let m = stir();
    let spec = nominal_spec(&m, &synth_opts()).unwrap();
    let x0 = [0.05, 0.0];
    let init = terminal_controller_rollout(&m, &spec, &x0);
    assert!(spec.check_feasible(&m, &x0, &init).feasible());
    let init_cost = spec.total_cost(&m, &x0, &init).unwrap();
    let r = solve_ocp(&m, &spec, &x0, &SolveOptions::default(), false).unwrap();
    assert!(r.feasible());
    assert!(r.cost <= init_cost + 1e-12, "{} > {init_cost}", r.cost);

    for d in 0..30 {
        let x0 = m.to_shifted_state(&m.sample_initial_state(5, d));
        let init = terminal_controller_rollout(&m, &spec, &x0);
        if !spec.check_feasible(&m, &x0, &init).feasible() {
            continue;
        }
        let c0 = spec.total_cost(&m, &x0, &init).unwrap();
        let r = solve_ocp(&m, &spec, &x0, &SolveOptions::default(), false).unwrap();
        assert!(r.feasible() && r.cost <= c0 + 1e-12, "draw {d}: {:?} {} vs {c0}", r.status, r.cost);
    }
}

#[test]
fn two_stage_problem_matches_grid_enumeration() {
    let m = stir().with_horizon(2).unwrap();
    let base = nominal_spec(&stir(), &synth_opts()).unwrap();
    // A larger terminal radius keeps a two-stage problem feasible away from the origin.
    let mut terminal = base.terminal().clone();
    terminal.alpha *= 4.0;
    let spec = base.with_horizon(2).unwrap().with_terminal(terminal).unwrap();
    let (lo, hi) = spec.input_set().box_bounds();
    let x0 = [0.03, -0.02];
    let grid: Vec<f64> = (0..5).map(|i| lo[0] + (hi[0] - lo[0]) * i as f64 / 4.0).collect();
    let mut best = f64::INFINITY;
    for &u0 in &grid {
        for &u1 in &grid {
            let useq = InputSequence::new(1, vec![u0, u1]);
            if spec.check_feasible(&m, &x0, &useq).feasible() {
                best = best.min(spec.total_cost(&m, &x0, &useq).unwrap());
            }
        }
    }
    assert!(best.is_finite(), "grid found no feasible point");
    let r = solve_ocp(&m, &spec, &x0, &SolveOptions::default(), false).unwrap();
    assert!(r.feasible());
    assert!(r.cost <= best + 1e-3, "solver {} grid {best}", r.cost);
}

#[test]
fn converged_results_pass_the_independent_check() {
    for id in [BenchmarkId::StirTank, BenchmarkId::Quadcopter, BenchmarkId::ChainMass { masses: 3 }] {
        let m = SystemModel::<f64>::benchmark(id).unwrap();
        let spec = nominal_spec(&m, &synth_opts()).unwrap();
        let mut converged = 0;
        for d in 0..12 {
            let x0: Vec<f64> = m.to_shifted_state(&m.sample_initial_state(11, d)).iter().map(|v| 0.3 * v).collect();
            let r = solve_ocp(&m, &spec, &x0, &SolveOptions::default(), false).unwrap();
            if r.feasible() {
                assert!(spec.check_feasible(&m, &x0, &r.useq).feasible(), "{id} draw {d}");
                let c = spec.total_cost(&m, &x0, &r.useq).unwrap();
                assert!((c - r.cost).abs() <= 1e-9 * (1.0 + c));
            }
            converged += (r.status == SolveStatus::Converged) as usize;
        }
        assert!(converged >= 6, "{id}: only {converged} converged");
    }
}

#[test]
fn tightened_solutions_pass_the_tightened_check() {
    let m = stir();
    let nominal = nominal_spec(&m, &synth_opts()).unwrap();
    let alpha_bar = 0.8 * nominal.terminal().alpha;
    let rows = nominal.state_set().n_rows();
    let spec = nominal
        .with_tightening(Tightening::Tube {
            rho: 0.2,
            wbar: 2e-3,
            c: vec![1.0; rows],
            c_input: None,
            k_delta: None,
            alpha_bar,
        })
        .unwrap();
    let mut feasible = 0;
    for d in 0..10 {
        let x0: Vec<f64> = m.to_shifted_state(&m.sample_initial_state(2, d)).iter().map(|v| 0.5 * v).collect();
        let r = solve_ocp(&m, &spec, &x0, &SolveOptions::default(), true).unwrap();
        if r.feasible() {
            assert!(spec.check_feasible_tightened(&m, &x0, &r.useq).unwrap().feasible());
            feasible += 1;
        }
    }
    assert!(feasible >= 5, "{feasible}");
}

#[test]
fn infeasible_initial_state_is_reported() {
    let m = stir();
    let spec = nominal_spec(&m, &synth_opts()).unwrap();
    let r = solve_ocp(&m, &spec, &[0.5, 0.0], &SolveOptions::default(), false).unwrap();
    assert_eq!(r.status, SolveStatus::Infeasible);
    assert!(!r.feasible());
}

#[test]
fn solve_rejects_bad_arguments() {
    let m = stir();
    let spec = nominal_spec(&m, &synth_opts()).unwrap();
    assert!(matches!(
        solve_ocp(&m, &spec, &[0.0], &SolveOptions::default(), false),
        Err(SolveError::Dimension { expected: 2, got: 1 })
    ));
    assert!(matches!(solve_ocp(&m, &spec, &[f64::NAN, 0.0], &SolveOptions::default(), false), Err(SolveError::NonFinite)));
    let bad = SolveOptions::default().with_max_iters(0);
    assert!(matches!(solve_ocp(&m, &spec, &[0.0, 0.0], &bad, false), Err(SolveError::Options(_))));
    assert!(solve_ocp(&m, &spec, &[0.0, 0.0], &SolveOptions::default(), true).is_err());
}

#[test]
fn solve_is_deterministic() {
    let m = SystemModel::<f64>::benchmark(BenchmarkId::Quadcopter).unwrap();
    let spec = nominal_spec(&m, &synth_opts()).unwrap();
    let x0: Vec<f64> = m.to_shifted_state(&m.sample_initial_state(9, 1)).iter().map(|v| 0.2 * v).collect();
    let a = solve_ocp(&m, &spec, &x0, &SolveOptions::default(), false).unwrap();
    let b = solve_ocp(&m, &spec, &x0, &SolveOptions::default(), false).unwrap();
    assert_eq!(a.useq, b.useq);
    assert_eq!(a.iters, b.iters);
}

#[test]
fn solve_config_parses_and_validates() {
    let c: SolveConfig = serde_json::from_str(r#"{"max_sqp_iters": 400, "init": "zeros"}"#).unwrap();
    let o: SolveOptions<f64> = c.to_options().unwrap();
    assert_eq!(o.max_sqp_iters, 400);
    assert_eq!(o.init, Init::Zeros);
    assert!(serde_json::from_str::<SolveConfig>(r#"{"max_iters": 3}"#).is_err());
    let bad = SolveConfig { tol_kkt: 0.0, ..SolveConfig::default() };
    assert!(bad.to_options::<f64>().is_err());
}

#[test]
fn terminal_certificate_holds_on_every_benchmark() {
    for id in [BenchmarkId::StirTank, BenchmarkId::Quadcopter, BenchmarkId::ChainMass { masses: 3 }] {
        let m = SystemModel::<f64>::benchmark(id).unwrap();
        let (q, r) = weights::<f64>(id);
        let (x, u) = constraint_sets(&m).unwrap();
        let t = synth_terminal(&m, &q, &r, &x, &u, &synth_opts()).unwrap();
        assert!(t.alpha > 1e-6, "{id}");
        for seed in [1u64, 2, 3] {
            let c = verify_terminal(&m, &q, &r, &x, &u, &t, 1000, seed, 1e-6, 0.5).unwrap();
            assert!(c.passed(), "{id} seed {seed}: {c:?}");
        }
    }
}

#[test]
fn decrease_condition_is_tight_at_origin() {
    let m = stir();
    let spec = nominal_spec(&m, &synth_opts()).unwrap();
    let t = spec.terminal();
    let zero = [0.0, 0.0];
    let u = t.feedback(&zero);
    let next = step_shifted(&m, &zero, &u).unwrap();
    let lhs = t.cost(&next) - t.cost(&zero) + spec.stage_cost(&zero, &u);
    assert!(lhs.abs() <= 1e-20);
}

#[test]
fn halving_the_input_set_never_grows_alpha() {
    for id in [BenchmarkId::StirTank, BenchmarkId::Quadcopter] {
        let m = SystemModel::<f64>::benchmark(id).unwrap();
        let (q, r) = weights::<f64>(id);
        let (x, u) = constraint_sets(&m).unwrap();
        let full = synth_terminal(&m, &q, &r, &x, &u, &synth_opts()).unwrap();
        let half = synth_terminal(&m, &q, &r, &x, &u.scaled(0.5), &synth_opts()).unwrap();
        assert!(half.alpha <= full.alpha, "{id}: {} > {}", half.alpha, full.alpha);
    }
}

/// `ẋ = a x + u` with `a` chosen so the exact discrete pole is 0.5.
#[derive(Debug)]
struct Scalar {
    a: f64,
}

impl VectorField<f64> for Scalar {
    fn n_x(&self) -> usize {
        1
    }
    fn n_u(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64], u: &[f64], dx: &mut [f64]) -> Result<(), ModelError> {
        dx[0] = self.a * x[0] + u[0];
        Ok(())
    }
}

fn scalar_model(substeps: usize) -> SystemModel<f64> {
    let ts = 0.1;
    let a = 0.5f64.ln() / ts;
    SystemModel::new(Arc::new(Scalar { a }), vec![0.0], vec![0.0], ts, 3, substeps, SampleBox::symmetric(&[1.0]))
        .unwrap()
}

fn scalar_spec(m: &SystemModel<f64>) -> safe_ampc::Spec {
    let x = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
    let u = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
    let (q, r) = (Matrix::identity(1), Matrix::identity(1));
    let t = safe_ampc::ocp::TerminalIngredients::new(Matrix::from_diag(&[2.0]), Matrix::zeros(1, 1), 0.5).unwrap();
    safe_ampc::ocp::OcpSpec::new(q, r, x, u, t, m.horizon()).unwrap()
}

#[test]
fn linear_model_lipschitz_constant_is_its_pole() {
    let m = scalar_model(20);
    let spec = scalar_spec(&m);
    let est = estimate_lipschitz(&m, &spec, 0.0, 10, 0);
    // RK4 amplification of the step polynomial, independent of the sample.
    let z = (0.5f64.ln() / 0.1) * (0.1 / 20.0);
    let exact = (1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0).powi(20);
    assert!((est.l_f - exact).abs() <= 1e-12, "{} vs {exact}", est.l_f);
    assert!((est.l_f - 0.5).abs() <= 1e-6);
    assert_eq!(est.eps_tilde, 0.0);
    assert!(est.top_l_f.len() <= 3);
}

#[test]
fn zero_perturbation_gives_zero_displacement() {
    let m = stir();
    let spec = nominal_spec(&m, &synth_opts()).unwrap();
    let est = estimate_lipschitz(&m, &spec, 0.0, 100, 1);
    assert_eq!(est.eps_tilde, 0.0);
    assert!(est.l_f > 0.0);
}

#[test]
fn stir_tank_displacement_matches_grid_oracle() {
    let m = stir();
    let spec = nominal_spec(&m, &synth_opts()).unwrap();
    let eps = 1e-4;
    let est = estimate_lipschitz(&m, &spec, eps, 2000, 17);
    let (xs, us) = sampling_region(&m, &spec);
    let lin = |(lo, hi): (f64, f64), n: usize, i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let mut grid_max = 0.0f64;
    for i in 0..100 {
        for j in 0..100 {
            for k in 0..50 {
                let x = [lin(xs[0], 100, i), lin(xs[1], 100, j)];
                let u = lin(us[0], 50, k);
                let Ok(base) = step_shifted(&m, &x, &[u]) else { continue };
                for d in [eps, -eps] {
                    if let Ok(p) = step_shifted(&m, &x, &[u + d]) {
                        let diff = (p[0] - base[0]).abs().max((p[1] - base[1]).abs());
                        grid_max = grid_max.max(diff);
                    }
                }
            }
        }
    }
    let rel = (est.eps_tilde - grid_max).abs() / grid_max;
    assert!(rel <= 0.2, "estimate {} grid {grid_max}", est.eps_tilde);
}

#[test]
fn lemma1_with_zero_radius_passes() {
    let m = stir();
    let spec = nominal_spec(&m, &synth_opts()).unwrap();
    let x0 = [0.05, -0.03];
    let rep = lemma1_probe(&m, &spec, &x0, 0.0, 20, 0, &SolveOptions::default()).unwrap();
    assert!(rep.passed);
    assert!(!rep.tightened);
    assert_eq!(rep.perturbations, 20 + 2 * m.horizon() + 2);
}

#[test]
fn lemma1_holds_with_lipschitz_tightening_on_a_contractive_plant() {
    let m = scalar_model(20);
    let spec = scalar_spec(&m);
    let eps = 0.02;
    let est = estimate_lipschitz(&m, &spec, eps, 200, 5);
    let spec = spec.with_tightening(Tightening::Lipschitz { l_f: est.l_f, eps, eps_tilde: est.eps_tilde }).unwrap();
    assert!(spec.tightened_alpha().unwrap() > 0.0);
    let mut probed = 0;
    for d in 0..20u64 {
        let x0 = [-0.95 + 0.1 * d as f64];
        match lemma1_probe(&m, &spec, &x0, eps, 50, d, &SolveOptions::default()) {
            Ok(rep) => {
                assert!(rep.tightened);
                assert!(rep.passed, "x0 {x0:?}: {:?}", rep.failures.first());
                probed += 1;
            }
            Err(ProbeError::NoSolution { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(probed >= 15, "only {probed} tightened-feasible states");
}

#[test]
fn stir_tank_lipschitz_terminal_radius_collapses() {
    // The one-step map is locally expanding (‖A‖∞ ≈ 1.95 at the target), so
    // the accumulated deviation bound over ten stages exceeds the terminal radius.
    let m = stir();
    let nominal = nominal_spec(&m, &synth_opts()).unwrap();
    let est = estimate_lipschitz(&m, &nominal, 1e-4, 500, 5);
    assert!(est.l_f > 1.9);
    let spec = nominal
        .with_tightening(Tightening::Lipschitz { l_f: est.l_f, eps: 1e-4, eps_tilde: est.eps_tilde })
        .unwrap();
    assert!(spec.tightened_alpha().unwrap() < 0.0);
    let x0 = [0.01, 0.0];
    let r = solve_ocp(&m, &spec, &x0, &SolveOptions::default(), true).unwrap();
    assert_eq!(r.status, SolveStatus::Infeasible);
}

#[test]
fn lemma1_without_tightening_can_fail() {
    let m = stir();
    let spec = nominal_spec(&m, &synth_opts()).unwrap();
    // Nominal solutions ride their active bounds up to the solver backoff.
    let eps = 1e-4;
    let mut failed = false;
    for d in 0..40 {
        let x0 = m.to_shifted_state(&m.sample_initial_state(4, d));
        if let Ok(rep) = lemma1_probe(&m, &spec, &x0, eps, 10, d, &SolveOptions::default()) {
            failed |= !rep.passed;
        }
        if failed {
            break;
        }
    }
    assert!(failed);
}
