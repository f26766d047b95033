//! `safe-ampc`: dataset generation, closed-loop batches, reports, terminal
//! synthesis, robust feasibility probes and plot export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use safe_ampc::benchmarks::{disturbance_bound, nominal_spec, tube_tightening, weights};
use safe_ampc::dataio::{aggregate_report, generate_dataset, render_table, sample_feasible_states, GenOptions};
use safe_ampc::guard::{simulate_closed_loop, Choice, GuardError, InitMode, KeepReason, Mode, RunLog, SimConfig};
use safe_ampc::models::{BenchmarkId, ModelConfig};
use safe_ampc::ocp::{OcpSpec, Tightening};
use safe_ampc::policy::{load_policy, Approximator, ConstantPolicy, MlpPolicy, NnApproximator, SolverReplay};
use safe_ampc::solver::{
    estimate_lipschitz, lemma1_probe, verify_terminal, LipschitzEstimate, SolveConfig, SolveOptions,
    TerminalSynthOptions,
};
use safe_ampc::{Model, Spec};

const WORKERS_ENV: &str = "SAFE_AMPC_WORKERS";

#[derive(Debug)]
enum CliError {
    /// Bad flags or configuration: exit code 2.
    Usage(String),
    /// Failure while running: exit code 1.
    Runtime(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "safe-ampc", version, about = "Safety-augmented approximate MPC toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Problem {
    /// stir_tank, quadcopter, chain_mass or chain_mass_<M>
    #[arg(long, value_parser = parse_benchmark)]
    benchmark: Option<BenchmarkId>,
    /// Model configuration JSON; replaces --benchmark
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Problem JSON from synth-terminal; synthesized when absent
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Solver options JSON
    #[arg(long)]
    solver_config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TighteningKind {
    Tube,
    Lipschitz,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModeArg {
    Safe,
    Naive,
    Solver,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Solver,
    SteadyState,
    Policy,
}

#[derive(Subcommand)]
enum Command {
    /// Sample initial states, solve, and write a dataset
    Gen {
        #[command(flatten)]
        problem: Problem,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Solve the tightened problem
        #[arg(long)]
        tightened: bool,
        /// Tightening added when the problem has none
        #[arg(long, value_enum, default_value = "tube")]
        tightening: TighteningKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop batch from solver-feasible initial states
    Simulate {
        #[command(flatten)]
        problem: Problem,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Weight file, or one of adversarial, zero, solver-replay
        #[arg(long)]
        policy: Option<String>,
        #[arg(long, default_value_t = 50)]
        n_runs: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// First candidate of guarded runs
        #[arg(long, value_enum, default_value = "solver")]
        init: InitArg,
        /// Re-check the candidate at every step
        #[arg(long)]
        debug: bool,
        /// Give up after this many draws (default 1000 per run)
        #[arg(long)]
        max_draws: Option<usize>,
    },
    /// Aggregate run logs into a safety and decision table
    Report {
        #[arg(long, num_args = 1.., required = true)]
        logs: Vec<PathBuf>,
        /// Also write the aggregates as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Synthesize and certify terminal ingredients, write the problem JSON
    SynthTerminal {
        #[arg(long, value_parser = parse_benchmark)]
        benchmark: Option<BenchmarkId>,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fresh samples for the certificate
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        /// Add the tube tightening
        #[arg(long)]
        tube: bool,
    },
    /// Robust feasibility probe with Lipschitz tightening
    Lemma1 {
        #[command(flatten)]
        problem: Problem,
        /// Input disturbance bound; defaults to the benchmark's
        #[arg(long)]
        eps: Option<f64>,
        /// Random perturbations per state, on top of the signed corners
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 50)]
        states: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        lipschitz_samples: usize,
        #[arg(long, default_value_t = 2000)]
        max_draws: usize,
    },
    /// Per-step CSV of a run log
    Plotdata {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_benchmark(s: &str) -> std::result::Result<BenchmarkId, String> {
    BenchmarkId::parse(s)
        .ok_or_else(|| format!("unknown benchmark '{s}'; valid: {}, chain_mass_<M>", BenchmarkId::NAMES.join(", ")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_model(benchmark: Option<BenchmarkId>, config: Option<&Path>) -> Result<Model> {
    match (benchmark, config) {
        (_, Some(path)) => {
            let cfg = ModelConfig::from_json(&read_text(path)?).map_err(usage)?;
            cfg.build().map_err(usage)
        }
        (Some(id), None) => Model::benchmark(id).map_err(usage),
        (None, None) => Err(usage(format!(
            "one of --benchmark or --model-config is required; benchmarks: {}",
            BenchmarkId::NAMES.join(", ")
        ))),
    }
}

struct Loaded {
    model: Model,
    spec: Spec,
    options: SolveOptions<f64>,
    id: BenchmarkId,
}

fn load_problem(p: &Problem) -> Result<Loaded> {
    let model = load_model(p.benchmark, p.model_config.as_deref())?;
    let id = model.benchmark_id().ok_or_else(|| usage("model is not a benchmark"))?;
    let spec = match &p.spec {
        Some(path) => {
            let spec = OcpSpec::from_json(&read_text(path)?).map_err(usage)?;
            if spec.n_x() != model.n_x() || spec.n_u() != model.n_u() || spec.horizon() != model.horizon() {
                return Err(usage(format!(
                    "{}: problem dimensions do not match the {} model",
                    path.display(),
                    id.name()
                )));
            }
            spec
        }
        None => nominal_spec(&model, &TerminalSynthOptions::default()).map_err(runtime)?,
    };
    let options = match &p.solver_config {
        Some(path) => {
            let cfg: SolveConfig =
                serde_json::from_str(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            cfg.to_options().map_err(usage)?
        }
        None => SolveOptions::default(),
    };
    Ok(Loaded { model, spec, options, id })
}

fn lipschitz_spec(l: &Loaded, eps: f64, samples: usize, seed: u64) -> Result<(Spec, LipschitzEstimate)> {
    let est = estimate_lipschitz(&l.model, &l.spec, eps, samples, seed);
    let t = Tightening::Lipschitz { l_f: est.l_f, eps, eps_tilde: est.eps_tilde };
    let spec = l.spec.clone().with_tightening(t).map_err(runtime)?;
    Ok((spec, est))
}

fn fmt_pct(p: f64) -> String {
    if p.fract() == 0.0 {
        format!("{p:.0}%")
    } else {
        format!("{p:.1}%")
    }
}

fn cmd_gen(problem: &Problem, n: usize, seed: u64, tightened: bool, kind: TighteningKind, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let l = load_problem(problem)?;
    let mut gen = GenOptions { solve: l.options.clone(), estimators: None };
    let spec = if tightened && l.spec.tightening().is_none() {
        let eps = disturbance_bound(l.id);
        match kind {
            TighteningKind::Tube => {
                let t = tube_tightening(&l.model, &l.spec, eps).map_err(runtime)?;
                l.spec.clone().with_tightening(t).map_err(runtime)?
            }
            TighteningKind::Lipschitz => {
                let (spec, est) = lipschitz_spec(&l, eps, 2000, seed)?;
                gen.estimators = Some(est);
                spec
            }
        }
    } else {
        l.spec.clone()
    };
    let start = Instant::now();
    let mut data = generate_dataset(&l.model, &spec, n, seed, tightened, &gen).map_err(runtime)?;
    let elapsed = start.elapsed();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    let bin = data.write(out).map_err(runtime)?;
    let c = data.manifest.counts;
    println!("dataset: {} + {}", out.display(), bin.display());
    println!("benchmark: {} tightened: {tightened} seed: {seed}", data.manifest.benchmark);
    println!("rows: {} row width: {}", data.manifest.rows, data.manifest.row_width);
    println!("feasible: {}/{}", c.feasible, c.attempted);
    println!("infeasible: {} errors: {}", c.infeasible, c.error);
    println!("offline time: {:.3} s", elapsed.as_secs_f64());
    Ok(())
}

enum PolicyKind {
    Adversarial,
    Zero,
    SolverReplay,
    Network(MlpPolicy<f64>),
}

impl PolicyKind {
    fn parse(arg: Option<&str>, mode: ModeArg, l: &Loaded) -> Result<Self> {
        let Some(arg) = arg else {
            return match mode {
                ModeArg::Solver => Ok(Self::Zero),
                _ => Err(usage("--policy is required for safe and naive modes")),
            };
        };
        match arg {
            "adversarial" => Ok(Self::Adversarial),
            "zero" => Ok(Self::Zero),
            "solver-replay" => Ok(Self::SolverReplay),
            path => {
                let path = Path::new(path);
                if !path.is_file() {
                    return Err(usage(format!("weights file {} does not exist", path.display())));
                }
                let p: MlpPolicy<f64> = load_policy(path).map_err(usage)?;
                if p.n_x() != l.model.n_x() || p.n_u() != l.model.n_u() || p.horizon() != l.spec.horizon() {
                    return Err(usage(format!(
                        "{}: network maps {} states to {}×{} inputs, problem needs {} to {}×{}",
                        path.display(),
                        p.n_x(),
                        p.horizon(),
                        p.n_u(),
                        l.model.n_x(),
                        l.spec.horizon(),
                        l.model.n_u()
                    )));
                }
                Ok(Self::Network(p))
            }
        }
    }

    fn build(&self, l: &Loaded) -> Box<dyn Approximator<f64>> {
        match self {
            Self::Adversarial => Box::new(ConstantPolicy::adversarial(l.spec.input_set(), l.spec.horizon(), &[])),
            Self::Zero => Box::new(ConstantPolicy::zero(l.model.n_u(), l.spec.horizon())),
            Self::SolverReplay => {
                Box::new(SolverReplay::new(l.model.clone(), l.spec.clone(), l.options.clone(), false))
            }
            Self::Network(p) => Box::new(NnApproximator { policy: p.clone(), input_set: l.spec.input_set().clone() }),
        }
    }
}

#[derive(Serialize)]
struct InitFailure {
    run_index: usize,
    draw: u64,
    x0: Vec<f64>,
    error: String,
}

#[derive(Serialize)]
struct BatchSummary {
    benchmark: String,
    mode: Mode,
    policy: String,
    seed: u64,
    steps: usize,
    runs_requested: usize,
    feasible_found: usize,
    draws_used: usize,
    init_failures: usize,
    runs: usize,
    safe_runs: usize,
    percent_safe: f64,
    nn_accepted_steps: usize,
    candidate_steps: usize,
    /// SHA-256 over the per-run digests in run order.
    digest: String,
    run_digests: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    problem: &Problem,
    mode: ModeArg,
    policy: Option<&str>,
    n_runs: usize,
    steps: usize,
    seed: u64,
    out: &Path,
    init: InitArg,
    debug: bool,
    max_draws: Option<usize>,
) -> Result<()> {
    if n_runs == 0 || steps == 0 {
        return Err(usage("--n-runs and --steps must be at least 1"));
    }
    let l = load_problem(problem)?;
    let kind = PolicyKind::parse(policy, mode, &l)?;
    let mode = match mode {
        ModeArg::Safe => Mode::SafetyAugmented,
        ModeArg::Naive => Mode::NaiveNn,
        ModeArg::Solver => Mode::OnlineSolver,
    };
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;

    let max_draws = max_draws.unwrap_or(1000 * n_runs);
    let (draws, used) = sample_feasible_states(&l.model, &l.spec, n_runs, seed, false, &l.options, max_draws);
    if draws.is_empty() {
        return Err(runtime(format!("no solver-feasible initial state in {used} draws")));
    }
    if draws.len() < n_runs {
        eprintln!("warning: only {} of {n_runs} feasible initial states in {used} draws", draws.len());
    }

    let results: Vec<std::result::Result<RunLog, GuardError>> = draws
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let init = match init {
                InitArg::Solver => InitMode::Sequence(d.solution.useq.clone()),
                InitArg::SteadyState => InitMode::SteadyState,
                InitArg::Policy => InitMode::Policy,
            };
            let mut cfg = SimConfig::new(mode, steps).with_init(init).with_debug(debug).with_run_index(i);
            cfg.solve_options = l.options.clone();
            let mut p = kind.build(&l);
            simulate_closed_loop(&l.model, &l.spec, p.as_mut(), &d.x0, &cfg)
        })
        .collect();

    let mut logs = Vec::new();
    let mut failures = Vec::new();
    for (i, (d, r)) in draws.iter().zip(results).enumerate() {
        match r {
            Ok(log) => {
                write_text(&out.join(format!("run_{i:05}.jsonl")), &log.to_jsonl(true))?;
                logs.push(log);
            }
            Err(e @ GuardError::InitInfeasible { .. }) => failures.push(InitFailure {
                run_index: i,
                draw: d.draw,
                x0: l.model.from_shifted_state(&d.x0),
                error: e.to_string(),
            }),
            Err(e) => return Err(runtime(format!("run {i}: {e}"))),
        }
    }
    if !failures.is_empty() {
        let text: String = failures.iter().map(|f| serde_json::to_string(f).expect("serializable") + "\n").collect();
        write_text(&out.join("init_failures.jsonl"), &text)?;
    }

    let run_digests: Vec<String> = logs.iter().map(RunLog::digest).collect();
    let mut h = Sha256::new();
    for d in &run_digests {
        h.update(d.as_bytes());
        h.update(b"\n");
    }
    let safe_runs = logs.iter().filter(|g| g.summary.safe).count();
    let percent_safe = if logs.is_empty() { 0.0 } else { 100.0 * safe_runs as f64 / logs.len() as f64 };
    let summary = BatchSummary {
        benchmark: l.id.name().to_string(),
        mode,
        policy: logs.first().map_or_else(|| policy.unwrap_or("-").to_string(), |g| g.summary.policy.clone()),
        seed,
        steps,
        runs_requested: n_runs,
        feasible_found: draws.len(),
        draws_used: used,
        init_failures: failures.len(),
        runs: logs.len(),
        safe_runs,
        percent_safe,
        nn_accepted_steps: logs.iter().map(|g| g.summary.nn_accepted).sum(),
        candidate_steps: logs.iter().map(|g| g.summary.candidate_applied).sum(),
        digest: hex::encode(h.finalize()),
        run_digests,
    };
    write_text(&out.join("summary.json"), &(serde_json::to_string_pretty(&summary).expect("serializable") + "\n"))?;
    println!("benchmark: {} mode: {} policy: {}", summary.benchmark, mode.name(), summary.policy);
    println!("runs: {} init failures: {} draws: {}", summary.runs, summary.init_failures, used);
    if mode == Mode::SafetyAugmented {
        let total = summary.nn_accepted_steps + summary.candidate_steps;
        let accepted = if total == 0 { 0.0 } else { 100.0 * summary.nn_accepted_steps as f64 / total as f64 };
        println!("nn accepted: {}", fmt_pct(accepted));
    }
    println!("safe: {}", fmt_pct(percent_safe));
    println!("digest: {}", summary.digest);
    Ok(())
}

fn collect_logs(paths: &[PathBuf]) -> Result<Vec<RunLog>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|x| x == "jsonl")
                        && f.file_name().is_some_and(|n| n.to_string_lossy().starts_with("run_"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(usage("no run logs found"));
    }
    files
        .iter()
        .map(|f| RunLog::from_jsonl(&read_text(f)?).map_err(|e| usage(format!("{}: {e}", f.display()))))
        .collect()
}

fn cmd_report(paths: &[PathBuf], json: Option<&Path>) -> Result<()> {
    let logs = collect_logs(paths)?;
    let mut benchmarks: Vec<String> = logs.iter().map(|l| l.summary.benchmark.clone()).collect();
    benchmarks.sort();
    benchmarks.dedup();
    let mut reports = Vec::new();
    for b in &benchmarks {
        let group: Vec<RunLog> = logs.iter().filter(|l| &l.summary.benchmark == b).cloned().collect();
        reports.push(aggregate_report(&group).map_err(runtime)?);
    }
    print!("{}", render_table(&reports));
    for r in &reports {
        for m in &r.modes {
            println!("{} {}: {}/{} runs safe", r.benchmark, m.mode.name(), m.safe_runs, m.runs);
        }
    }
    if let Some(path) = json {
        write_text(path, &(serde_json::to_string_pretty(&reports).expect("serializable") + "\n"))?;
    }
    Ok(())
}

fn cmd_synth(
    benchmark: Option<BenchmarkId>,
    config: Option<&Path>,
    out: &Path,
    seed: u64,
    samples: usize,
    tube: bool,
) -> Result<()> {
    let model = load_model(benchmark, config)?;
    let id = model.benchmark_id().ok_or_else(|| usage("model is not a benchmark"))?;
    let options = TerminalSynthOptions { seed, ..TerminalSynthOptions::default() };
    let mut spec = nominal_spec(&model, &options).map_err(runtime)?;
    let (q, r) = weights::<f64>(id);
    let cert = verify_terminal(
        &model,
        &q,
        &r,
        spec.state_set(),
        spec.input_set(),
        spec.terminal(),
        samples,
        seed.wrapping_add(0x5eed),
        options.margin,
        options.interior_fraction,
    )
    .map_err(runtime)?;
    println!("benchmark: {id}");
    println!("alpha: {:e}", spec.terminal().alpha);
    println!(
        "certificate: {} ({} samples, invariance {} decrease {} input {} failures)",
        if cert.passed() { "PASS" } else { "FAIL" },
        cert.samples,
        cert.invariance_failures,
        cert.decrease_failures,
        cert.input_failures
    );
    if !cert.passed() {
        return Err(runtime("terminal certificate failed on fresh samples"));
    }
    if tube {
        let t = tube_tightening(&model, &spec, disturbance_bound(id)).map_err(runtime)?;
        spec = spec.with_tightening(t).map_err(runtime)?;
        println!("tightened alpha: {:e}", spec.tightened_alpha().map_err(runtime)?);
    }
    write_text(out, &(spec.to_json() + "\n"))?;
    println!("spec: {} ({})", out.display(), spec.digest());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_lemma1(
    problem: &Problem,
    eps: Option<f64>,
    trials: usize,
    states: usize,
    seed: u64,
    lipschitz_samples: usize,
    max_draws: usize,
) -> Result<bool> {
    let l = load_problem(problem)?;
    let eps = eps.unwrap_or_else(|| disturbance_bound(l.id));
    if !(eps >= 0.0) {
        return Err(usage("--eps must be nonnegative"));
    }
    let (spec, est) = lipschitz_spec(&l, eps, lipschitz_samples, seed)?;
    let alpha_bar = spec.tightened_alpha().map_err(runtime)?;
    println!("benchmark: {} eps: {eps:e}", l.id);
    println!("L_f: {:.6} eps_tilde: {:e} ({} samples)", est.l_f, est.eps_tilde, est.n_samples);
    println!("tightened terminal radius: {alpha_bar:e} (nominal {:e})", spec.terminal().alpha);
    if !(alpha_bar > 0.0) {
        println!("states: 0/{states} tightened-feasible");
        println!("lemma1: FAIL (tightened terminal set is empty)");
        return Ok(false);
    }
    let (draws, used) = sample_feasible_states(&l.model, &spec, states, seed, true, &l.options, max_draws);
    println!("states: {}/{states} tightened-feasible in {used} draws", draws.len());
    let reports: Vec<_> = draws
        .par_iter()
        .map(|d| lemma1_probe(&l.model, &spec, &d.x0, eps, trials, seed ^ d.draw, &l.options))
        .collect();
    let mut perturbations = 0;
    let mut failed = 0;
    for r in reports {
        let r = r.map_err(runtime)?;
        perturbations += r.perturbations;
        failed += r.failures.len();
    }
    println!("perturbations: {perturbations} failures: {failed}");
    let pass = draws.len() == states && failed == 0;
    println!("lemma1: {}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

fn cmd_plotdata(log: &Path, out: &Path) -> Result<()> {
    let run = RunLog::from_jsonl(&read_text(log)?).map_err(|e| usage(format!("{}: {e}", log.display())))?;
    let n_x = run.steps.first().map_or(0, |s| s.x.len());
    let n_u = run.steps.first().map_or(0, |s| s.u.len());
    let mut w = csv::Writer::from_path(out).map_err(runtime)?;
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((1..=n_x).map(|i| format!("x{i}")));
    header.extend((1..=n_u).map(|i| format!("u{i}")));
    header.extend(
        [
            "decision",
            "reason",
            "violation_state",
            "violation_input",
            "violation",
            "cost",
            "value",
            "cumulative_cost",
            "timing_infer_ns",
            "timing_rollout_check_ns",
            "timing_total_ns",
        ]
        .map(String::from),
    );
    w.write_record(&header).map_err(runtime)?;
    for s in &run.steps {
        let (decision, reason) = match s.decision.as_ref().map(|d| &d.choice) {
            None => ("", ""),
            Some(Choice::NnAccepted) => ("nn_accepted", ""),
            Some(Choice::CandidateKept(KeepReason::Infeasible { .. })) => ("candidate_kept", "infeasible"),
            Some(Choice::CandidateKept(KeepReason::CostWorse { .. })) => ("candidate_kept", "cost_worse"),
            Some(Choice::CandidateKept(KeepReason::ProposalError { .. })) => ("candidate_kept", "proposal_error"),
        };
        let flag = |b: bool| if b { "1" } else { "0" }.to_string();
        let mut row: Vec<String> = vec![s.t.to_string()];
        row.extend(s.x.iter().chain(&s.u).map(|v| v.to_string()));
        row.extend([
            decision.to_string(),
            reason.to_string(),
            flag(s.violations.state),
            flag(s.violations.input),
            flag(s.violations.any()),
            s.cost.to_string(),
            s.value.map_or_else(String::new, |v| v.to_string()),
            s.cumulative_cost.to_string(),
            s.timings_ns.infer_ns.to_string(),
            s.timings_ns.rollout_check_ns.to_string(),
            s.timings_ns.total_ns.to_string(),
        ]);
        w.write_record(&row).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    println!("rows: {} -> {}", run.steps.len(), out.display());
    Ok(())
}

fn configure_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|n| *n > 0).ok_or_else(|| usage(format!("{WORKERS_ENV}={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)
}

fn run(cli: Cli) -> Result<bool> {
    configure_workers()?;
    match cli.command {
        Command::Gen { problem, n, seed, tightened, tightening, out } => {
            cmd_gen(&problem, n, seed, tightened, tightening, &out)?
        }
        Command::Simulate { problem, mode, policy, n_runs, steps, seed, out, init, debug, max_draws } => {
            cmd_simulate(&problem, mode, policy.as_deref(), n_runs, steps, seed, &out, init, debug, max_draws)?
        }
        Command::Report { logs, json } => cmd_report(&logs, json.as_deref())?,
        Command::SynthTerminal { benchmark, model_config, out, seed, samples, tube } => {
            cmd_synth(benchmark, model_config.as_deref(), &out, seed, samples, tube)?
        }
        Command::Lemma1 { problem, eps, trials, states, seed, lipschitz_samples, max_draws } => {
            return cmd_lemma1(&problem, eps, trials, states, seed, lipschitz_samples, max_draws)
        }
        Command::Plotdata { log, out } => cmd_plotdata(&log, &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
