use safe_ampc::benchmarks::{disturbance_bound, nominal_spec, tube_tightening};
use safe_ampc::dataio::*;
use safe_ampc::guard::{
    simulate_closed_loop, InitMode, Mode, ReasonCounts, RunLog, RunSummary, SimConfig, StepRecord, StepViolations,
    Timings,
};
use safe_ampc::models::{BenchmarkId, SystemModel};
use safe_ampc::ocp::OcpSpec;
use safe_ampc::policy::ConstantPolicy;
use safe_ampc::solver::{SolveOptions, TerminalSynthOptions};

fn stir() -> (SystemModel<f64>, OcpSpec<f64>) {
    let m = SystemModel::benchmark(BenchmarkId::StirTank).unwrap();
    let spec = nominal_spec(&m, &TerminalSynthOptions::default()).unwrap();
    (m, spec)
}

fn robust_stir() -> (SystemModel<f64>, OcpSpec<f64>) {
    let (m, spec) = stir();
    let t = tube_tightening(&m, &spec, disturbance_bound(BenchmarkId::StirTank)).unwrap();
    let spec = spec.with_tightening(t).unwrap();
    (m, spec)
}

#[test]
fn forced_target_gives_one_zero_cost_record() {
    let (m, spec) = stir();
    let d = generate_dataset_at(&m, &spec, &[vec![0.0, 0.0]], 0, false, &GenOptions::default()).unwrap();
    assert_eq!(d.records.len(), 1);
    assert!(d.records[0].cost <= 1e-10);
    assert_eq!(d.manifest.counts, Counts { attempted: 1, feasible: 1, infeasible: 0, error: 0 });
}

#[test]
fn same_seed_gives_identical_files_and_round_trips() {
    let (m, spec) = stir();
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str| {
        let mut d = generate_dataset(&m, &spec, 24, 7, false, &GenOptions::default()).unwrap();
        let path = dir.path().join(name);
        let bin = d.write(&path).unwrap();
        let text = std::fs::read(&path).unwrap();
        (path, text, std::fs::read(bin).unwrap())
    };
    let (p1, m1, b1) = write("a.json");
    let (_, m2, b2) = write("b.json");
    assert_eq!(b1, b2);
    assert_eq!(String::from_utf8(m1.clone()).unwrap().replace("a.bin", "b.bin").into_bytes(), m2);

    let mut back = Dataset::read(&p1).unwrap();
    let p3 = dir.path().join("a.json");
    let bin3 = back.write(&p3).unwrap();
    assert_eq!(std::fs::read(&p3).unwrap(), m1);
    assert_eq!(std::fs::read(bin3).unwrap(), b1);
    assert_eq!(b1.len(), back.records.len() * back.row_width() * 8);
}

#[test]
fn records_pass_the_generating_check_and_counts_add_up() {
    let (m, spec) = robust_stir();
    let d = generate_dataset(&m, &spec, 40, 3, true, &GenOptions::default()).unwrap();
    let c = d.manifest.counts;
    assert_eq!(c.attempted, c.feasible + c.infeasible + c.error);
    assert_eq!(c.attempted, d.manifest.solves.len());
    assert_eq!(c.feasible, d.records.len());
    for r in &d.records {
        assert!(spec.check_feasible_tightened(&m, &r.x0, &r.useq).unwrap().feasible());
        assert!(spec.check_feasible(&m, &r.x0, &r.useq).feasible());
        let x0 = m.to_shifted_state(&m.sample_initial_state(3, r.draw));
        assert_eq!(x0, r.x0);
    }
    assert!(d.records.windows(2).all(|w| w[0].draw < w[1].draw));
    assert_eq!(d.manifest.spec_hash, spec.digest());
    assert!(d.manifest.tightened);
}

#[test]
fn tightened_stir_tank_keeps_most_draws() {
    // Pilot at seed 3 kept 72% of 64 draws; ±15% slack around it.
    let (m, spec) = robust_stir();
    let d = generate_dataset(&m, &spec, 200, 11, true, &GenOptions::default()).unwrap();
    let frac = d.records.len() as f64 / 200.0;
    assert!(frac > 0.5, "{frac}");
    assert!((0.57..=0.87).contains(&frac), "{frac}");
}

#[test]
fn feasible_filter_is_ordered_and_stops_at_the_count() {
    let (m, spec) = stir();
    let (a, used) = sample_feasible_states(&m, &spec, 10, 5, false, &SolveOptions::default(), 1000);
    assert_eq!(a.len(), 10);
    assert_eq!(used as u64, a[9].draw + 1);
    assert!(a.windows(2).all(|w| w[0].draw < w[1].draw));
    let d = generate_dataset(&m, &spec, used, 5, false, &GenOptions::default()).unwrap();
    assert_eq!(d.records.iter().map(|r| r.draw).collect::<Vec<_>>(), a.iter().map(|f| f.draw).collect::<Vec<_>>());
}

#[test]
fn bad_data_blocks_are_rejected() {
    let (m, spec) = stir();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    let mut d = generate_dataset(&m, &spec, 4, 1, false, &GenOptions::default()).unwrap();
    let bin = d.write(&path).unwrap();
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes.pop();
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(Dataset::read(&path), Err(DataError::Size { .. })));
    assert!(matches!(generate_dataset(&m, &spec, 0, 1, false, &GenOptions::default()), Err(DataError::Empty)));
}

fn synthetic(mode: Mode, bench: &str, safe: bool) -> RunLog {
    let step = StepRecord {
        t: 0,
        x: vec![0.0],
        u: vec![0.0],
        mode,
        decision: None,
        violations: StepViolations { state: !safe, input: false },
        cost: 0.0,
        value: None,
        cumulative_cost: 0.0,
        timings_ns: Timings::default(),
    };
    let summary = RunSummary {
        run_index: 0,
        benchmark: bench.into(),
        mode,
        policy: "fixture".into(),
        steps_requested: 1,
        steps: 1,
        x_final: vec![0.0],
        final_state_violation: false,
        violating_steps: (!safe) as usize,
        safe,
        nn_accepted: 0,
        candidate_applied: 0,
        reasons: ReasonCounts::default(),
        terminal_clamps: 0,
        total_cost: 0.0,
        diverged_at: None,
        error: None,
    };
    RunLog { steps: vec![step], summary }
}

#[test]
fn report_percentages() {
    let all_safe: Vec<RunLog> = (0..4).map(|_| synthetic(Mode::SafetyAugmented, "stir_tank", true)).collect();
    assert_eq!(aggregate_report(&all_safe).unwrap().modes[0].percent_safe, 100.0);

    let one = aggregate_report(&[synthetic(Mode::NaiveNn, "stir_tank", false)]).unwrap();
    assert_eq!(one.modes[0].percent_safe, 0.0);

    let mut mix: Vec<RunLog> = (0..7).map(|_| synthetic(Mode::NaiveNn, "quadcopter", true)).collect();
    mix.extend((0..3).map(|_| synthetic(Mode::NaiveNn, "quadcopter", false)));
    let r = aggregate_report(&mix).unwrap();
    assert_eq!((r.modes[0].runs, r.modes[0].safe_runs), (10, 7));
    assert!((r.modes[0].percent_safe - 70.0).abs() < 1e-12);

    mix.push(synthetic(Mode::NaiveNn, "stir_tank", true));
    assert!(matches!(aggregate_report(&mix), Err(DataError::MixedBenchmarks(..))));
    assert!(matches!(aggregate_report(&[]), Err(DataError::NoLogs)));
}

#[test]
fn report_over_real_runs_has_the_table_shape() {
    let (m, spec) = stir();
    let (draws, _) = sample_feasible_states(&m, &spec, 4, 2, false, &SolveOptions::default(), 100);
    let mut logs = Vec::new();
    for (i, d) in draws.iter().enumerate() {
        for mode in [Mode::SafetyAugmented, Mode::NaiveNn] {
            let mut p = ConstantPolicy::adversarial(spec.input_set(), spec.horizon(), &[]);
            let cfg = SimConfig::new(mode, 20).with_init(InitMode::Sequence(d.solution.useq.clone())).with_run_index(i);
            logs.push(simulate_closed_loop(&m, &spec, &mut p, &d.x0, &cfg).unwrap());
        }
    }
    let r = aggregate_report(&logs).unwrap();
    let safe = r.modes.iter().find(|a| a.mode == Mode::SafetyAugmented).unwrap();
    assert_eq!(safe.percent_safe, 100.0);
    assert_eq!(safe.percent_candidate, 100.0);
    assert!(safe.percent_state + safe.percent_terminal + safe.percent_input >= 100.0);
    let naive = r.modes.iter().find(|a| a.mode == Mode::NaiveNn).unwrap();
    assert!(naive.percent_safe < 100.0);
    let table = render_table(&[r]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].contains("naive") && lines[1].contains("terminal %") && lines[1].contains("cost %"));
    assert!(lines[3].starts_with("stir_tank"));
    let widths: Vec<usize> = lines.iter().map(|l| l.chars().count()).collect();
    assert!(widths.iter().all(|w| *w == widths[0]), "{widths:?}");
}
