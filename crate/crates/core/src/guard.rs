//! Online safety augmentation around an approximator, and closed-loop runs.
//!
//! The guard keeps a candidate input sequence that is feasible for the state
//! it will next be called with. Each step it evaluates the approximator's
//! proposal, applies whichever of the two is feasible and cheaper (the
//! candidate on ties), and shifts the applied sequence by one stage with the
//! terminal controller appended.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::models::SystemModel;
use crate::ocp::{FeasibilityReport, OcpSpec, ViolationKinds};
use crate::policy::{Approximator, PolicyError, SolverReplay};
use crate::rollout::{rollout_shifted, step_shifted, InputSequence, RolloutError, StateTrajectory};
use crate::scalar::Real;
use crate::solver::{solve_ocp, terminal_controller_rollout, SolveError, SolveOptions};

/// Absolute-plus-relative slack on the cost-decrease inequality.
pub const COST_DECREASE_RTOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GuardError {
    #[error("no initialization strategy produced a feasible candidate")]
    InitInfeasible { report: FeasibilityReport },
    #[error("stored candidate is infeasible at the measured state (step {step})")]
    CandidateInfeasible { step: usize, report: FeasibilityReport },
    #[error("state has dimension {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// How the first candidate is produced.
pub enum InitStrategy<'a, T: Real> {
    /// Terminal controller rollout; meant for states inside the terminal set.
    FromSteadyState,
    FromSolver(SolveOptions<T>),
    FromPolicy(&'a mut dyn Approximator<T>),
    /// A sequence computed elsewhere, for example during feasibility filtering.
    FromSequence(InputSequence<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum KeepReason {
    /// `cost_worse` also records whether the proposal failed the cost test.
    Infeasible { report: FeasibilityReport, cost_worse: bool },
    CostWorse { v_nn: f64, v_cand: f64 },
    /// The approximator returned an error (for example a non-finite output).
    ProposalError { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "chosen", rename_all = "snake_case")]
pub enum Choice {
    NnAccepted,
    CandidateKept(KeepReason),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub infer_ns: u64,
    pub rollout_check_ns: u64,
    pub total_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub choice: Choice,
    /// Cost of the applied sequence from the measured state.
    pub v_applied: f64,
    /// The appended terminal-controller input had to be clamped into `U`.
    pub terminal_clamped: bool,
    pub timings: Timings,
}

impl Decision {
    pub fn accepted(&self) -> bool {
        self.choice == Choice::NnAccepted
    }
}

/// Result of one guarded step, in shifted coordinates.
#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    pub input: Vec<T>,
    pub decision: Decision,
}

/// Persistent candidate of the safety augmentation.
#[derive(Debug, Clone)]
pub struct GuardState<T: Real> {
    model: SystemModel<T>,
    spec: OcpSpec<T>,
    candidate: InputSequence<T>,
    /// Predicted trajectory of the candidate, valid while the plant follows the model.
    cand_traj: Option<StateTrajectory<T>>,
    step_index: usize,
    debug: bool,
    history: Option<Vec<Decision>>,
}

fn nanos(since: Instant) -> u64 {
    since.elapsed().as_nanos().min(u64::MAX as u128) as u64
}

impl<T: Real> GuardState<T> {
    /// Builds the first candidate at shifted state `x0`; never returns an
    /// infeasible guard.
    pub fn init(
        model: &SystemModel<T>,
        spec: &OcpSpec<T>,
        x0: &[T],
        strategy: InitStrategy<'_, T>,
    ) -> Result<Self, GuardError> {
        if x0.len() != model.n_x() {
            return Err(GuardError::Dimension { expected: model.n_x(), got: x0.len() });
        }
        let candidate = match strategy {
            InitStrategy::FromSteadyState => terminal_controller_rollout(model, spec, x0),
            InitStrategy::FromSolver(options) => solve_ocp(model, spec, x0, &options, false)?.useq,
            InitStrategy::FromPolicy(policy) => policy.propose(x0)?,
            InitStrategy::FromSequence(useq) => useq,
        };
        if candidate.n_u() != model.n_u() || candidate.horizon() != spec.horizon() {
            return Err(GuardError::Policy(PolicyError::Shape {
                what: "initial candidate",
                expected: model.n_u() * spec.horizon(),
                got: candidate.as_slice().len(),
            }));
        }
        let report = spec.check_feasible(model, x0, &candidate);
        if !report.feasible() {
            return Err(GuardError::InitInfeasible { report });
        }
        Ok(Self {
            model: model.clone(),
            spec: spec.clone(),
            candidate,
            cand_traj: None,
            step_index: 0,
            debug: false,
            history: None,
        })
    }

    /// Re-check the stored candidate at every step and fail loudly on a breach.
    pub fn with_debug(mut self, on: bool) -> Self {
        self.debug = on;
        self
    }

    pub fn with_history(mut self, on: bool) -> Self {
        self.history = on.then(Vec::new);
        self
    }

    pub fn candidate(&self) -> &InputSequence<T> {
        &self.candidate
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn history(&self) -> Option<&[Decision]> {
        self.history.as_deref()
    }

    pub fn model(&self) -> &SystemModel<T> {
        &self.model
    }

    pub fn spec(&self) -> &OcpSpec<T> {
        &self.spec
    }

    /// One step at the measured shifted state `x`.
    pub fn control_step(&mut self, x: &[T], policy: &mut dyn Approximator<T>) -> Result<StepOutcome<T>, GuardError> {
        let start = Instant::now();
        if x.len() != self.model.n_x() {
            return Err(GuardError::Dimension { expected: self.model.n_x(), got: x.len() });
        }
        if self.debug {
            let report = self.spec.check_feasible(&self.model, x, &self.candidate);
            if !report.feasible() {
                return Err(GuardError::CandidateInfeasible { step: self.step_index, report });
            }
        }

        let t_infer = Instant::now();
        let proposal = policy.propose(x);
        let infer_ns = nanos(t_infer);

        let t_check = Instant::now();
        let cached = self.cand_traj.take().filter(|t| t.state(0) == x);
        let cand_traj = match cached {
            Some(t) => Ok(t),
            None => rollout_shifted(&self.model, x, &self.candidate),
        };
        let (v_cand, cand_traj) = match cand_traj {
            Ok(traj) => (self.spec.trajectory_cost(&traj, &self.candidate), traj),
            Err(_) => {
                let report = self.spec.check_feasible(&self.model, x, &self.candidate);
                return Err(GuardError::CandidateInfeasible { step: self.step_index, report });
            }
        };
        let mut chosen = None;
        let choice = match proposal {
            Err(e) => Choice::CandidateKept(KeepReason::ProposalError { message: e.to_string() }),
            Ok(useq) if useq.n_u() != self.model.n_u() || useq.horizon() != self.spec.horizon() => {
                Choice::CandidateKept(KeepReason::ProposalError {
                    message: format!("proposal has {} stages of width {}", useq.horizon(), useq.n_u()),
                })
            }
            Ok(useq) => {
                let eval = self.spec.evaluate(&self.model, x, &useq);
                match (eval.report.feasible(), eval.cost, eval.trajectory) {
                    (true, Some(v_nn), Some(traj)) if v_nn < v_cand => {
                        chosen = Some((useq, traj, v_nn));
                        Choice::NnAccepted
                    }
                    (true, Some(v_nn), _) => Choice::CandidateKept(KeepReason::CostWorse {
                        v_nn: v_nn.to_f64_lossy(),
                        v_cand: v_cand.to_f64_lossy(),
                    }),
                    (_, cost, _) => Choice::CandidateKept(KeepReason::Infeasible {
                        report: eval.report,
                        cost_worse: cost.map_or(true, |v_nn| v_nn >= v_cand),
                    }),
                }
            }
        };
        let (applied, traj, v_applied) = chosen.unwrap_or_else(|| (self.candidate.clone(), cand_traj, v_cand));
        let rollout_check_ns = nanos(t_check);

        let mut tail = self.spec.terminal().feedback(traj.last());
        let terminal_clamped = self.spec.input_set().clamp_box(&mut tail);
        let input = applied.first().to_vec();
        self.candidate = applied.shift_append(&tail);
        self.cand_traj = step_shifted(&self.model, traj.last(), &tail).ok().map(|next| traj.shift_append(&next));
        self.step_index += 1;

        let decision = Decision {
            choice,
            v_applied: v_applied.to_f64_lossy(),
            terminal_clamped,
            timings: Timings { infer_ns, rollout_check_ns, total_ns: nanos(start) },
        };
        if let Some(h) = &mut self.history {
            h.push(decision.clone());
        }
        Ok(StepOutcome { input, decision })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SafetyAugmented,
    NaiveNn,
    OnlineSolver,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::SafetyAugmented => "safety_augmented",
            Mode::NaiveNn => "naive_nn",
            Mode::OnlineSolver => "online_solver",
        }
    }
}

/// How a [`Mode::SafetyAugmented`] run obtains its first candidate.
#[derive(Debug, Clone, PartialEq)]
pub enum InitMode<T> {
    SteadyState,
    Solver,
    Policy,
    Sequence(InputSequence<T>),
}

#[derive(Debug, Clone)]
pub struct SimConfig<T: Real> {
    pub steps: usize,
    pub mode: Mode,
    pub init: InitMode<T>,
    pub solve_options: SolveOptions<T>,
    /// Re-validate the candidate at every step.
    pub debug: bool,
    pub run_index: usize,
}

impl<T: Real> SimConfig<T> {
    pub fn new(mode: Mode, steps: usize) -> Self {
        Self { steps, mode, init: InitMode::Solver, solve_options: SolveOptions::default(), debug: false, run_index: 0 }
    }

    pub fn with_init(mut self, init: InitMode<T>) -> Self {
        self.init = init;
        self
    }

    pub fn with_debug(mut self, on: bool) -> Self {
        self.debug = on;
        self
    }

    pub fn with_run_index(mut self, index: usize) -> Self {
        self.run_index = index;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepViolations {
    pub state: bool,
    pub input: bool,
}

impl StepViolations {
    pub fn any(&self) -> bool {
        self.state || self.input
    }
}

/// Log form of a guard decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    #[serde(flatten)]
    pub choice: Choice,
    pub v_applied: f64,
    pub terminal_clamped: bool,
}

/// One closed-loop step; states and inputs in original coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub mode: Mode,
    pub decision: Option<DecisionRecord>,
    pub violations: StepViolations,
    /// Stage cost `ℓ(x(t), u(t))`.
    pub cost: f64,
    /// Prediction cost of the applied sequence (guard and solver modes).
    pub value: Option<f64>,
    pub cumulative_cost: f64,
    pub timings_ns: Timings,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonCounts {
    pub input: usize,
    pub state: usize,
    pub terminal: usize,
    pub cost: usize,
    pub proposal_error: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_index: usize,
    pub benchmark: String,
    pub mode: Mode,
    pub policy: String,
    pub steps_requested: usize,
    pub steps: usize,
    pub x_final: Vec<f64>,
    pub final_state_violation: bool,
    pub violating_steps: usize,
    pub safe: bool,
    pub nn_accepted: usize,
    pub candidate_applied: usize,
    pub reasons: ReasonCounts,
    pub terminal_clamps: usize,
    pub total_cost: f64,
    /// Step at which the plant or the controller failed, if any.
    pub diverged_at: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Step(StepRecord),
    Summary(RunSummary),
}

/// Step records followed by a summary footer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub summary: RunSummary,
}

#[derive(Debug, thiserror::Error)]
pub enum RunLogError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("log has no summary record")]
    MissingSummary,
    #[error("line {line}: record after the summary")]
    TrailingRecord { line: usize },
}

impl RunLog {
    /// JSON lines; without timings the output is reproducible bit for bit.
    pub fn to_jsonl(&self, with_timings: bool) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let mut rec = s.clone();
            if !with_timings {
                rec.timings_ns = Timings::default();
            }
            out.push_str(&serde_json::to_string(&LogLine::Step(rec)).expect("serializable"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&LogLine::Summary(self.summary.clone())).expect("serializable"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, RunLogError> {
        let mut steps = Vec::new();
        let mut summary = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            if summary.is_some() {
                return Err(RunLogError::TrailingRecord { line: i + 1 });
            }
            match serde_json::from_str(line).map_err(|source| RunLogError::Parse { line: i + 1, source })? {
                LogLine::Step(s) => steps.push(s),
                LogLine::Summary(s) => summary = Some(s),
            }
        }
        Ok(Self { steps, summary: summary.ok_or(RunLogError::MissingSummary)? })
    }

    /// SHA-256 of the log with timing fields zeroed.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl(false).as_bytes()))
    }

    /// Steps `t` at which `V(t+1) ≤ V(t) − ℓ(t) + 1e-6·(1 + |V(t)|)` fails.
    pub fn cost_decrease_failures(&self) -> Vec<usize> {
        self.steps
            .windows(2)
            .filter_map(|w| {
                let (v0, v1) = (w[0].value?, w[1].value?);
                let ok = v1 <= v0 - w[0].cost + COST_DECREASE_RTOL * (1.0 + v0.abs());
                (!ok).then_some(w[0].t)
            })
            .collect()
    }

    pub fn decisions(&self) -> impl Iterator<Item = &DecisionRecord> {
        self.steps.iter().filter_map(|s| s.decision.as_ref())
    }
}

fn violations<T: Real>(spec: &OcpSpec<T>, x: &[T], u: &[T]) -> StepViolations {
    let (x_ok, u_ok) = spec.state_input_ok(x, u);
    StepViolations { state: !x_ok, input: !u_ok }
}

fn count_reasons(reasons: &mut ReasonCounts, choice: &Choice) {
    match choice {
        Choice::NnAccepted => {}
        Choice::CandidateKept(KeepReason::CostWorse { .. }) => reasons.cost += 1,
        Choice::CandidateKept(KeepReason::ProposalError { .. }) => reasons.proposal_error += 1,
        Choice::CandidateKept(KeepReason::Infeasible { report, cost_worse }) => {
            let ViolationKinds { input, state, terminal } = report.kinds;
            reasons.cost += *cost_worse as usize;
            reasons.input += input as usize;
            reasons.state += state as usize;
            reasons.terminal += terminal as usize;
        }
    }
}

enum Driver<T: Real> {
    Guard(GuardState<T>),
    Naive,
    Solver(Box<SolverReplay<T>>),
}

/// Simulates `config.steps` steps of the plant from shifted state `x0`.
///
/// Failures of the plant or controller end the run early and are recorded
/// in the summary; only initialization failures of a guarded run and
/// argument errors are returned as `Err`.
pub fn simulate_closed_loop<T: Real>(
    model: &SystemModel<T>,
    spec: &OcpSpec<T>,
    policy: &mut dyn Approximator<T>,
    x0: &[T],
    config: &SimConfig<T>,
) -> Result<RunLog, GuardError> {
    if x0.len() != model.n_x() {
        return Err(GuardError::Dimension { expected: model.n_x(), got: x0.len() });
    }
    let mut driver = match config.mode {
        Mode::SafetyAugmented => {
            let strategy = match &config.init {
                InitMode::SteadyState => InitStrategy::FromSteadyState,
                InitMode::Solver => InitStrategy::FromSolver(config.solve_options.clone()),
                InitMode::Policy => InitStrategy::FromPolicy(&mut *policy),
                InitMode::Sequence(u) => InitStrategy::FromSequence(u.clone()),
            };
            Driver::Guard(GuardState::init(model, spec, x0, strategy)?.with_debug(config.debug))
        }
        Mode::NaiveNn => Driver::Naive,
        Mode::OnlineSolver => {
            Driver::Solver(Box::new(SolverReplay::new(model.clone(), spec.clone(), config.solve_options.clone(), false)))
        }
    };

    let policy_name = match config.mode {
        Mode::OnlineSolver => "solver".to_string(),
        _ => policy.name().to_string(),
    };
    let mut summary = RunSummary {
        run_index: config.run_index,
        benchmark: model.benchmark_id().map_or_else(|| "custom".to_string(), |b| b.name().to_string()),
        mode: config.mode,
        policy: policy_name,
        steps_requested: config.steps,
        steps: 0,
        x_final: Vec::new(),
        final_state_violation: false,
        violating_steps: 0,
        safe: false,
        nn_accepted: 0,
        candidate_applied: 0,
        reasons: ReasonCounts::default(),
        terminal_clamps: 0,
        total_cost: 0.0,
        diverged_at: None,
        error: None,
    };
    let mut steps = Vec::with_capacity(config.steps);
    let mut x = x0.to_vec();
    let mut cumulative = T::zero();

    for t in 0..config.steps {
        let start = Instant::now();
        let step: Result<(Vec<T>, Option<Decision>, Option<T>), String> = match &mut driver {
            Driver::Guard(g) => g
                .control_step(&x, policy)
                .map(|o| {
                    let v = T::lit(o.decision.v_applied);
                    (o.input, Some(o.decision), Some(v))
                })
                .map_err(|e| e.to_string()),
            Driver::Naive => policy.propose(&x).map(|u| (u.first().to_vec(), None, None)).map_err(|e| e.to_string()),
            Driver::Solver(s) => s
                .propose(&x)
                .map_err(|e| e.to_string())
                .and_then(|u| {
                    let v = spec.total_cost(model, &x, &u).map_err(|e: RolloutError| e.to_string())?;
                    Ok((u.first().to_vec(), None, Some(v)))
                }),
        };
        let (u, decision, value) = match step {
            Ok(s) => s,
            Err(e) => {
                summary.diverged_at = Some(t);
                summary.error = Some(e);
                break;
            }
        };
        let total_ns = nanos(start);
        let viol = violations(spec, &x, &u);
        let ell = spec.stage_cost(&x, &u);
        cumulative += ell;
        let timings = match &decision {
            Some(d) => d.timings,
            None => Timings { infer_ns: 0, rollout_check_ns: 0, total_ns },
        };
        if let Some(d) = &decision {
            if d.accepted() {
                summary.nn_accepted += 1;
            } else {
                summary.candidate_applied += 1;
            }
            count_reasons(&mut summary.reasons, &d.choice);
            summary.terminal_clamps += d.terminal_clamped as usize;
        }
        summary.violating_steps += viol.any() as usize;
        steps.push(StepRecord {
            t,
            x: model.from_shifted_state(&x).iter().map(|v| v.to_f64_lossy()).collect(),
            u: model.from_shifted_input(&u).iter().map(|v| v.to_f64_lossy()).collect(),
            mode: config.mode,
            decision: decision.map(|d| DecisionRecord {
                choice: d.choice,
                v_applied: d.v_applied,
                terminal_clamped: d.terminal_clamped,
            }),
            violations: viol,
            cost: ell.to_f64_lossy(),
            value: value.map(|v| v.to_f64_lossy()),
            cumulative_cost: cumulative.to_f64_lossy(),
            timings_ns: timings,
        });
        summary.steps = t + 1;
        match step_shifted(model, &x, &u) {
            Ok(next) => x = next,
            Err(e) => {
                summary.diverged_at = Some(t + 1);
                summary.error = Some(e.to_string());
                break;
            }
        }
    }

    summary.x_final = model.from_shifted_state(&x).iter().map(|v| v.to_f64_lossy()).collect();
    summary.final_state_violation = summary.diverged_at.is_some() || !spec.state_set().contains(&x, spec.tol_feas());
    summary.total_cost = cumulative.to_f64_lossy();
    summary.safe = summary.violating_steps == 0 && !summary.final_state_violation;
    Ok(RunLog { steps, summary })
}
