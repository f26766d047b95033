use std::path::Path;
use std::process::{Command, Output};

use safe_ampc::models::{BenchmarkId, SystemModel};
use safe_ampc::ocp::Polytope;
use safe_ampc::policy::{save_policy, MlpPolicy, Scaling, WeightMeta, PROBE_STATES};
use sha2::{Digest, Sha256};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safe-ampc")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = cli(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn weights_for(dir: &Path, id: BenchmarkId) -> std::path::PathBuf {
    let m = SystemModel::<f64>::benchmark(id).unwrap();
    let (n_x, n_u, horizon) = (m.n_x(), m.n_u(), m.horizon());
    let ue = m.u_e().to_vec();
    let lo: Vec<f64> = ue.iter().map(|u| -u.abs() - 1.0).collect();
    let hi: Vec<f64> = ue.iter().map(|u| u.abs() + 1.0).collect();
    let u = Polytope::from_box(&lo, &hi).unwrap();
    let meta = WeightMeta { n_x, n_u, horizon, benchmark: id.name().into(), training_tol: 1e-3 };
    let p = MlpPolicy::random(meta, Scaling::from_boxes(m.sample_box(), &u, horizon), &[16, 16], 9)
        .unwrap()
        .with_probe(PROBE_STATES, 9)
        .unwrap();
    let path = dir.join(format!("{}.json", id.name()));
    save_policy(&p, &path).unwrap();
    path
}

#[test]
fn gen_prints_the_summary_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a/data.json");
    let b = dir.path().join("b/data.json");
    let out = ok(&["gen", "--benchmark", "stir_tank", "--n", "20", "--seed", "1", "--out", s(&a)]);
    ok(&["gen", "--benchmark", "stir_tank", "--n", "20", "--seed", "1", "--out", s(&b)]);
    let line = out.lines().find(|l| l.starts_with("feasible: ")).unwrap();
    assert!(line.ends_with("/20"), "{line}");
    assert_eq!(sha(&a.with_extension("bin")), sha(&b.with_extension("bin")));
    assert_eq!(sha(&a), sha(&b));
}

#[test]
fn tightened_gen_records_the_tightening() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    ok(&["gen", "--benchmark", "stir_tank", "--n", "10", "--tightened", "--out", s(&out)]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(m["tightened"], true);
    assert_eq!(m["coordinates"], "shifted");
}

#[test]
fn unknown_benchmark_is_a_usage_error_listing_the_names() {
    let o = cli(&["gen", "--benchmark", "pendulum", "--n", "3", "--out", "/tmp/unused.json"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for name in BenchmarkId::NAMES {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn bad_weights_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("logs");
    let missing = dir.path().join("missing.json");
    let args = ["simulate", "--benchmark", "stir_tank", "--mode", "safe", "--n-runs", "1", "--out", s(&logs)];
    let o = cli(&[&args[..], &["--policy", s(&missing)]].concat());
    assert_eq!(o.status.code(), Some(2));
    let quad = weights_for(dir.path(), BenchmarkId::Quadcopter);
    let o = cli(&[&args[..], &["--policy", s(&quad)]].concat());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("network maps"));
    let o = cli(&["simulate", "--benchmark", "stir_tank", "--mode", "naive", "--out", s(&logs)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn guarded_adversarial_batch_is_fully_safe_and_naive_is_not() {
    let dir = tempfile::tempdir().unwrap();
    let safe = dir.path().join("safe");
    let naive = dir.path().join("naive");
    let common = ["--benchmark", "stir_tank", "--policy", "adversarial", "--n-runs", "8", "--steps", "30", "--seed", "4"];
    let out = ok(&[&["simulate", "--mode", "safe", "--out", s(&safe)][..], &common].concat());
    assert!(out.lines().any(|l| l == "safe: 100%"), "{out}");
    let out = ok(&[&["simulate", "--mode", "naive", "--out", s(&naive)][..], &common].concat());
    let pct: f64 = out.lines().find_map(|l| l.strip_prefix("safe: ")).unwrap().trim_end_matches('%').parse().unwrap();
    assert!(pct < 100.0, "{out}");
    assert_eq!(summary(&safe)["runs"], 8);
    assert_eq!(std::fs::read_dir(&safe).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "jsonl").count(), 8);
}

#[test]
fn online_solver_batch_has_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("solver");
    ok(&["simulate", "--benchmark", "stir_tank", "--mode", "solver", "--n-runs", "5", "--steps", "30", "--out", s(&logs)]);
    let sum = summary(&logs);
    assert_eq!(sum["safe_runs"], 5);
    for i in 0..5 {
        let text = std::fs::read_to_string(logs.join(format!("run_{i:05}.jsonl"))).unwrap();
        let log = safe_ampc::guard::RunLog::from_jsonl(&text).unwrap();
        assert_eq!(log.summary.violating_steps, 0);
        assert!(log.steps.iter().all(|st| !st.violations.any()));
    }
}

#[test]
fn network_policy_runs_guarded_and_digests_do_not_depend_on_workers() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights_for(dir.path(), BenchmarkId::StirTank);
    let run = |name: &str, workers: &str| {
        let logs = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_safe-ampc"))
            .env("SAFE_AMPC_WORKERS", workers)
            .args(["simulate", "--benchmark", "stir_tank", "--mode", "safe", "--policy", s(&w)])
            .args(["--n-runs", "6", "--steps", "25", "--seed", "2", "--out", s(&logs)])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("safe: 100%"));
        summary(&logs)
    };
    let a = run("one", "1");
    let b = run("two", "2");
    assert_eq!(a["digest"], b["digest"]);
    assert_eq!(a["policy"], b["policy"]);

    let o = Command::new(env!("CARGO_BIN_EXE_safe-ampc"))
        .env("SAFE_AMPC_WORKERS", "zero")
        .args(["report", "--logs", s(&dir.path().join("one"))])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_prints_one_row_per_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for mode in ["safe", "naive"] {
        let logs = dir.path().join(mode);
        ok(&["simulate", "--benchmark", "stir_tank", "--mode", mode, "--policy", "adversarial"]
            .into_iter()
            .chain(["--n-runs", "3", "--steps", "20", "--out", s(&logs)])
            .collect::<Vec<_>>());
        dirs.push(logs);
    }
    let json = dir.path().join("report.json");
    let out = ok(&["report", "--logs", s(&dirs[0]), s(&dirs[1]), "--json", s(&json)]);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[1].starts_with("benchmark"));
    assert!(lines[3].starts_with("stir_tank"));
    assert!(out.contains("stir_tank safety_augmented: 3/3 runs safe"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(r[0]["modes"].as_array().unwrap().len(), 2);
}

#[test]
fn synthesized_problem_round_trips_through_gen() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    let out = ok(&["synth-terminal", "--benchmark", "stir_tank", "--out", s(&spec)]);
    assert!(out.contains("certificate: PASS (10000 samples"), "{out}");
    let data = dir.path().join("d.json");
    ok(&["gen", "--benchmark", "stir_tank", "--spec", s(&spec), "--n", "5", "--out", s(&data)]);
    let o = cli(&["gen", "--benchmark", "quadcopter", "--spec", s(&spec), "--n", "5", "--out", s(&data)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn lemma1_without_disturbance_passes() {
    let out = ok(&["lemma1", "--benchmark", "stir_tank", "--eps", "0", "--trials", "10", "--states", "5"]);
    assert!(out.lines().any(|l| l == "lemma1: PASS"), "{out}");
}

#[test]
fn plotdata_flags_the_violation_in_the_last_row() {
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("naive");
    ok(&["simulate", "--benchmark", "stir_tank", "--mode", "naive", "--policy", "adversarial"]
        .into_iter()
        .chain(["--n-runs", "1", "--steps", "30", "--out", s(&logs)])
        .collect::<Vec<_>>());
    let csv_path = dir.path().join("run.csv");
    ok(&["plotdata", "--log", s(&logs.join("run_00000.jsonl")), "--out", s(&csv_path)]);
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    let header = r.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    assert!(header.iter().last().unwrap().starts_with("timing_"));
    assert!(col("timing_infer_ns") > col("cumulative_cost"));
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 30);
    assert_eq!(&rows[29][col("violation")], "1");
    assert_eq!(&rows[0][col("x1")].parse::<f64>().is_ok(), &true);
}
