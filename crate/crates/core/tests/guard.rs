use safe_ampc::benchmarks::nominal_spec;
use safe_ampc::dataio::sample_feasible_states;
use safe_ampc::guard::*;
use safe_ampc::models::{BenchmarkId, SystemModel};
use safe_ampc::ocp::{OcpSpec, ViolationKind};
use safe_ampc::policy::{Approximator, ConstantPolicy, SolverReplay};
use safe_ampc::rollout::step_shifted;
use safe_ampc::solver::{SolveOptions, TerminalSynthOptions};

fn setup(id: BenchmarkId) -> (SystemModel<f64>, OcpSpec<f64>) {
    let m = SystemModel::benchmark(id).unwrap();
    let spec = nominal_spec(&m, &TerminalSynthOptions::default()).unwrap();
    (m, spec)
}

fn stir() -> (SystemModel<f64>, OcpSpec<f64>) {
    setup(BenchmarkId::StirTank)
}

fn adversarial(spec: &OcpSpec<f64>) -> ConstantPolicy<f64> {
    ConstantPolicy::adversarial(spec.input_set(), spec.horizon(), &[])
}

fn replay(m: &SystemModel<f64>, spec: &OcpSpec<f64>) -> SolverReplay<f64> {
    SolverReplay::new(m.clone(), spec.clone(), SolveOptions::default(), false)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn steady_state_init_at_the_target_is_the_constant_steady_input() {
    let (m, spec) = stir();
    let g = GuardState::init(&m, &spec, &[0.0, 0.0], InitStrategy::FromSteadyState).unwrap();
    assert!(g.candidate().as_slice().iter().all(|u| *u == 0.0));
    let original: Vec<f64> = g.candidate().stages().flat_map(|u| m.from_shifted_input(u)).collect();
    assert!(original.iter().all(|u| *u == m.u_e()[0]));
}

#[test]
fn solver_init_passes_the_checker() {
    let (m, spec) = stir();
    let (draws, _) = sample_feasible_states(&m, &spec, 5, 21, false, &SolveOptions::default(), 100);
    assert_eq!(draws.len(), 5);
    for d in draws {
        let g = GuardState::init(&m, &spec, &d.x0, InitStrategy::FromSolver(SolveOptions::default())).unwrap();
        assert!(spec.check_feasible(&m, &d.x0, g.candidate()).feasible());
    }
}

#[test]
fn init_outside_the_state_set_is_refused() {
    let (m, spec) = stir();
    let x0 = [0.25, 0.0];
    match GuardState::init(&m, &spec, &x0, InitStrategy::FromSolver(SolveOptions::default())) {
        Err(GuardError::InitInfeasible { report }) => {
            let v = report.first_violation.unwrap();
            assert_eq!((v.kind, v.stage), (ViolationKind::State, 0));
        }
        other => panic!("{other:?}"),
    }
    let mut p = adversarial(&spec);
    assert!(matches!(
        GuardState::init(&m, &spec, &x0, InitStrategy::FromPolicy(&mut p)),
        Err(GuardError::InitInfeasible { .. })
    ));
    assert!(matches!(
        GuardState::init(&m, &spec, &x0, InitStrategy::FromSteadyState),
        Err(GuardError::InitInfeasible { .. })
    ));
}

#[test]
fn garbage_policy_is_always_rejected_and_the_loop_stays_safe() {
    let (m, spec) = stir();
    let (draws, _) = sample_feasible_states(&m, &spec, 3, 4, false, &SolveOptions::default(), 100);
    for d in draws {
        let mut g = GuardState::init(&m, &spec, &d.x0, InitStrategy::FromSequence(d.solution.useq.clone()))
            .unwrap()
            .with_debug(true);
        let mut p = adversarial(&spec);
        let mut x = d.x0.clone();
        for _ in 0..50 {
            let head = g.candidate().first().to_vec();
            let out = g.control_step(&x, &mut p).unwrap();
            assert!(matches!(out.decision.choice, Choice::CandidateKept(KeepReason::Infeasible { .. })));
            assert_eq!(out.input, head);
            x = step_shifted(&m, &x, &out.input).unwrap();
            assert!(spec.state_set().contains(&x, spec.tol_feas()));
        }
    }
}

#[test]
fn solver_replay_is_accepted_when_cheaper_and_cost_decreases() {
    let (m, spec) = stir();
    let (draws, _) = sample_feasible_states(&m, &spec, 3, 9, false, &SolveOptions::default(), 100);
    for d in draws {
        let mut p = replay(&m, &spec);
        let cfg = SimConfig::new(Mode::SafetyAugmented, 30).with_init(InitMode::Sequence(d.solution.useq.clone())).with_debug(true);
        let log = simulate_closed_loop(&m, &spec, &mut p, &d.x0, &cfg).unwrap();
        assert!(log.summary.safe);
        assert!(log.summary.nn_accepted > 0);
        for r in log.decisions() {
            match &r.choice {
                Choice::NnAccepted => {}
                Choice::CandidateKept(KeepReason::CostWorse { v_nn, v_cand }) => assert!(v_nn >= v_cand),
                other => panic!("solver replay rejected: {other:?}"),
            }
        }
        assert_eq!(log.cost_decrease_failures(), Vec::<usize>::new());
        for w in log.steps.windows(2) {
            let (v0, v1) = (w[0].value.unwrap(), w[1].value.unwrap());
            assert!(v1 <= v0 - w[0].cost + 1e-6 * (1.0 + v0.abs()));
        }
    }
}

#[test]
fn terminal_controller_candidate_keeps_the_state_in_the_terminal_set() {
    let (m, spec) = stir();
    let t = spec.terminal();
    let x0 = [0.004, -0.002];
    assert!(t.contains(&x0, t.alpha, 0.0));
    let mut g = GuardState::init(&m, &spec, &x0, InitStrategy::FromSteadyState).unwrap().with_debug(true);
    let mut p = adversarial(&spec);
    let mut x = x0.to_vec();
    for _ in 0..50 {
        let out = g.control_step(&x, &mut p).unwrap();
        assert!(!out.decision.accepted());
        let mut u = t.feedback(&x);
        spec.input_set().clamp_box(&mut u);
        assert!((out.input[0] - u[0]).abs() <= 1e-12, "{:?} vs {u:?}", out.input);
        x = step_shifted(&m, &x, &out.input).unwrap();
        assert!(t.contains(&x, t.alpha, spec.tol_feas()));
    }
}

#[test]
fn debug_mode_refuses_a_perturbed_plant() {
    let (m, spec) = stir();
    let (draws, _) = sample_feasible_states(&m, &spec, 1, 2, false, &SolveOptions::default(), 100);
    let d = &draws[0];
    let mut p = adversarial(&spec);
    let mut g = GuardState::init(&m, &spec, &d.x0, InitStrategy::FromSequence(d.solution.useq.clone())).unwrap();
    let far = [0.199, 0.199];
    assert!(GuardState::init(&m, &spec, &far, InitStrategy::FromSolver(SolveOptions::default())).is_err());
    let mut quiet = g.clone();
    g = g.with_debug(true);
    match g.control_step(&far, &mut p) {
        Err(GuardError::CandidateInfeasible { step: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert!(quiet.control_step(&far, &mut p).is_ok());
}

#[test]
fn history_records_each_decision() {
    let (m, spec) = stir();
    let mut g = GuardState::init(&m, &spec, &[0.0, 0.0], InitStrategy::FromSteadyState).unwrap().with_history(true);
    let mut p = ConstantPolicy::<f64>::zero(1, spec.horizon());
    let mut x = vec![0.0, 0.0];
    for _ in 0..3 {
        let out = g.control_step(&x, &mut p).unwrap();
        // Equal cost at the target: the tie goes to the candidate.
        assert!(matches!(out.decision.choice, Choice::CandidateKept(KeepReason::CostWorse { .. })));
        x = step_shifted(&m, &x, &out.input).unwrap();
    }
    assert_eq!(g.history().unwrap().len(), 3);
    assert_eq!(g.step_index(), 3);
}

#[test]
fn safety_augmented_runs_never_violate() {
    let (m, spec) = stir();
    let (draws, _) = sample_feasible_states(&m, &spec, 10, 33, false, &SolveOptions::default(), 200);
    for (i, d) in draws.iter().enumerate() {
        let cfg = SimConfig::new(Mode::SafetyAugmented, 50)
            .with_init(InitMode::Sequence(d.solution.useq.clone()))
            .with_debug(true)
            .with_run_index(i);
        let mut adv = adversarial(&spec);
        let mut zero = ConstantPolicy::zero(1, spec.horizon());
        let mut policies: [&mut dyn Approximator<f64>; 2] = [&mut adv, &mut zero];
        for p in policies.iter_mut() {
            let log = simulate_closed_loop(&m, &spec, *p, &d.x0, &cfg).unwrap();
            assert!(log.summary.safe, "{:?}", log.summary);
            assert_eq!(log.summary.steps, 50);
            assert!(log.cost_decrease_failures().is_empty());
            let v0 = log.steps[0].value.unwrap();
            let total: f64 = log.steps.iter().map(|s| s.cost).sum();
            assert!(total <= v0 + 50.0 * 1e-6 * (1.0 + v0.abs()));
        }
    }
}

#[test]
fn online_solver_on_the_stir_tank_is_safe_and_contracting() {
    let (m, spec) = stir();
    let (draws, _) = sample_feasible_states(&m, &spec, 4, 8, false, &SolveOptions::default(), 100);
    let mut unused = adversarial(&spec);
    for d in draws {
        let log = simulate_closed_loop(&m, &spec, &mut unused, &d.x0, &SimConfig::new(Mode::OnlineSolver, 50)).unwrap();
        assert!(log.summary.safe);
        assert_eq!(log.summary.policy, "solver");
        assert!(log.decisions().next().is_none());
        let x_t = m.to_shifted_state(&log.summary.x_final);
        assert!(norm(&x_t) <= norm(&d.x0));
    }
}

#[test]
fn guarded_solver_replay_converges_on_the_stir_tank() {
    let (m, spec) = stir();
    let (draws, _) = sample_feasible_states(&m, &spec, 3, 12, false, &SolveOptions::default(), 100);
    for d in draws {
        let mut p = replay(&m, &spec);
        let cfg = SimConfig::new(Mode::SafetyAugmented, 100).with_init(InitMode::Sequence(d.solution.useq.clone()));
        let log = simulate_closed_loop(&m, &spec, &mut p, &d.x0, &cfg).unwrap();
        let x_t = m.to_shifted_state(&log.summary.x_final);
        assert!(norm(&x_t) <= 0.05 * norm(&d.x0), "{} vs {}", norm(&x_t), norm(&d.x0));
    }
}

#[test]
fn naive_adversarial_quadcopter_hits_the_wall() {
    let (m, spec) = setup(BenchmarkId::Quadcopter);
    let mut x0 = vec![0.0; 10];
    x0[0] = 0.10;
    x0[3] = 0.05;
    let mut p = ConstantPolicy::adversarial(spec.input_set(), spec.horizon(), &[1.0, 1.0, 1.0]);
    let log = simulate_closed_loop(&m, &spec, &mut p, &x0, &SimConfig::new(Mode::NaiveNn, 50)).unwrap();
    assert!(!log.summary.safe);
    assert!(log.steps.iter().any(|s| s.violations.state));
    let guarded = SimConfig::new(Mode::SafetyAugmented, 50).with_debug(true);
    let log = simulate_closed_loop(&m, &spec, &mut p, &x0, &guarded).unwrap();
    assert!(log.summary.safe, "{:?}", log.summary);
}

#[test]
fn runs_are_reproducible_and_logs_round_trip() {
    let (m, spec) = stir();
    let (draws, _) = sample_feasible_states(&m, &spec, 2, 17, false, &SolveOptions::default(), 100);
    for d in draws {
        let run = || {
            let mut p = replay(&m, &spec);
            let cfg = SimConfig::new(Mode::SafetyAugmented, 20);
            simulate_closed_loop(&m, &spec, &mut p, &d.x0, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.to_jsonl(false), b.to_jsonl(false));
        let back = RunLog::from_jsonl(&a.to_jsonl(true)).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.digest(), a.digest());
    }
    assert!(matches!(RunLog::from_jsonl(""), Err(RunLogError::MissingSummary)));
}

#[test]
fn reused_candidate_prediction_matches_a_fresh_rollout() {
    let (m, spec) = setup(BenchmarkId::Quadcopter);
    let (draws, _) = sample_feasible_states(&m, &spec, 1, 3, false, &SolveOptions::default(), 2000);
    let d = &draws[0];
    let mut g = GuardState::init(&m, &spec, &d.x0, InitStrategy::FromSequence(d.solution.useq.clone())).unwrap();
    let mut p = adversarial(&spec);
    let mut x = d.x0.clone();
    for t in 0..30 {
        // A perturbed measurement forces the fallback path.
        if t == 10 {
            x[0] += 1e-9;
        }
        let v_cand = spec.total_cost(&m, &x, g.candidate()).unwrap();
        let out = g.control_step(&x, &mut p).unwrap();
        assert!(!out.decision.accepted());
        assert_eq!(out.decision.v_applied.to_bits(), v_cand.to_bits(), "step {t}");
        x = step_shifted(&m, &x, &out.input).unwrap();
    }
}
