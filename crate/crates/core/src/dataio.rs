//! Offline dataset generation, the dataset file format, and aggregation of
//! closed-loop run logs into safety reports.
//!
//! A dataset is a JSON manifest next to a flat little-endian `f64` block
//! with one row `[x0 | u_0 … u_{N−1} | cost]` per feasible draw, all in
//! shifted coordinates.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::guard::{Mode, RunLog};
use crate::models::SystemModel;
use crate::ocp::{OcpSpec, TighteningDoc};
use crate::rollout::InputSequence;
use crate::scalar::Real;
use crate::solver::{solve_ocp, LipschitzEstimate, SolveOptions, SolveResult, SolveStatus};

pub const DATASET_FORMAT: &str = "safe-ampc-dataset/1";

/// Draws solved per parallel batch while filtering for feasible states.
const FILTER_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("data block has {got} bytes, manifest implies {expected}")]
    Size { expected: usize, got: usize },
    #[error("n_points must be at least 1")]
    Empty,
    #[error("logs mix benchmarks `{0}` and `{1}`")]
    MixedBenchmarks(String, String),
    #[error("no run logs given")]
    NoLogs,
}

fn io_err(path: &Path, e: impl ToString) -> DataError {
    DataError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub attempted: usize,
    pub feasible: usize,
    pub infeasible: usize,
    pub error: usize,
}

/// Per-draw solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiag {
    pub draw: u64,
    /// `converged`, `max_iters`, `infeasible`, `rejected` (solver and checker
    /// disagree) or `error`.
    pub status: String,
    pub iters: usize,
    pub kkt: Option<f64>,
    /// Row index in the data block for kept draws.
    pub row: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub benchmark: String,
    pub spec_hash: String,
    pub seed: u64,
    pub tightened: bool,
    pub coordinates: String,
    pub n_x: usize,
    pub n_u: usize,
    #[serde(rename = "N")]
    pub horizon: usize,
    pub row_width: usize,
    pub rows: usize,
    pub x_e: Vec<f64>,
    pub u_e: Vec<f64>,
    pub counts: Counts,
    pub tightening: TighteningDoc,
    pub estimators: Option<LipschitzEstimate>,
    pub data_file: String,
    pub solves: Vec<SolveDiag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub draw: u64,
    pub x0: Vec<f64>,
    pub useq: InputSequence<f64>,
    pub cost: f64,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<Record>,
}

/// Generation settings beyond the problem itself.
#[derive(Debug, Clone)]
pub struct GenOptions<T: Real> {
    pub solve: SolveOptions<T>,
    /// Stamped into the manifest when the tightening came from an estimate.
    pub estimators: Option<LipschitzEstimate>,
}

impl<T: Real> Default for GenOptions<T> {
    fn default() -> Self {
        Self { solve: SolveOptions::default(), estimators: None }
    }
}

enum Outcome<T> {
    Kept(SolveResult<T>),
    Infeasible(SolveResult<T>),
    Rejected(SolveResult<T>),
    Error,
}

fn solve_verified<T: Real>(
    model: &SystemModel<T>,
    spec: &OcpSpec<T>,
    x0: &[T],
    tightened: bool,
    options: &SolveOptions<T>,
) -> Outcome<T> {
    match solve_ocp(model, spec, x0, options, tightened) {
        Err(_) => Outcome::Error,
        Ok(r) if !r.feasible() => Outcome::Infeasible(r),
        Ok(r) => match spec.check(model, x0, &r.useq, tightened) {
            Ok(report) if report.feasible() => Outcome::Kept(r),
            _ => Outcome::Rejected(r),
        },
    }
}

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIters => "max_iters",
        SolveStatus::Infeasible => "infeasible",
    }
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Samples `n_points` initial states with `seed`, solves each and keeps the
/// verified feasible solutions in draw order.
pub fn generate_dataset<T: Real>(
    model: &SystemModel<T>,
    spec: &OcpSpec<T>,
    n_points: usize,
    seed: u64,
    tightened: bool,
    options: &GenOptions<T>,
) -> Result<Dataset, DataError> {
    if n_points == 0 {
        return Err(DataError::Empty);
    }
    let states: Vec<Vec<T>> =
        (0..n_points as u64).map(|d| model.to_shifted_state(&model.sample_initial_state(seed, d))).collect();
    generate_dataset_at(model, spec, &states, seed, tightened, options)
}

/// As [`generate_dataset`] on given shifted initial states; draw `i` is `states[i]`.
pub fn generate_dataset_at<T: Real>(
    model: &SystemModel<T>,
    spec: &OcpSpec<T>,
    states: &[Vec<T>],
    seed: u64,
    tightened: bool,
    options: &GenOptions<T>,
) -> Result<Dataset, DataError> {
    if states.is_empty() {
        return Err(DataError::Empty);
    }
    let outcomes: Vec<Outcome<T>> =
        states.par_iter().map(|x0| solve_verified(model, spec, x0, tightened, &options.solve)).collect();

    let mut counts = Counts { attempted: states.len(), ..Counts::default() };
    let mut solves = Vec::with_capacity(states.len());
    let mut records = Vec::new();
    for (draw, (x0, outcome)) in states.iter().zip(outcomes).enumerate() {
        let draw = draw as u64;
        let diag = |status: &str, r: Option<&SolveResult<T>>, row| SolveDiag {
            draw,
            status: status.to_string(),
            iters: r.map_or(0, |r| r.iters),
            kkt: r.and_then(|r| finite_or_none(r.kkt_residual.to_f64_lossy())),
            row,
        };
        match outcome {
            Outcome::Kept(r) => {
                solves.push(diag(status_name(r.status), Some(&r), Some(records.len())));
                counts.feasible += 1;
                records.push(Record {
                    draw,
                    x0: x0.iter().map(|v| v.to_f64_lossy()).collect(),
                    useq: r.useq.cast(),
                    cost: r.cost.to_f64_lossy(),
                    status: r.status,
                });
            }
            Outcome::Infeasible(r) => {
                counts.infeasible += 1;
                solves.push(diag("infeasible", Some(&r), None));
            }
            Outcome::Rejected(r) => {
                counts.error += 1;
                solves.push(diag("rejected", Some(&r), None));
            }
            Outcome::Error => {
                counts.error += 1;
                solves.push(diag("error", None, None));
            }
        }
    }
    let (n_x, n_u, horizon) = (model.n_x(), model.n_u(), spec.horizon());
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        benchmark: model.benchmark_id().map_or_else(|| "custom".to_string(), |b| b.name().to_string()),
        spec_hash: spec.digest(),
        seed,
        tightened,
        coordinates: "shifted".into(),
        n_x,
        n_u,
        horizon,
        row_width: n_x + n_u * horizon + 1,
        rows: records.len(),
        x_e: model.x_e().iter().map(|v| v.to_f64_lossy()).collect(),
        u_e: model.u_e().iter().map(|v| v.to_f64_lossy()).collect(),
        counts,
        tightening: spec.to_doc().tightening,
        estimators: options.estimators.clone(),
        data_file: String::new(),
        solves,
    };
    Ok(Dataset { manifest, records })
}

/// A sampled state whose solution passed the feasibility check.
#[derive(Debug, Clone)]
pub struct FeasibleDraw<T> {
    pub draw: u64,
    /// Shifted coordinates.
    pub x0: Vec<T>,
    pub solution: SolveResult<T>,
}

/// The first `count` draws (by index) whose solve is verified feasible,
/// and the number of draws consumed. Stops after `max_draws` draws.
pub fn sample_feasible_states<T: Real>(
    model: &SystemModel<T>,
    spec: &OcpSpec<T>,
    count: usize,
    seed: u64,
    tightened: bool,
    options: &SolveOptions<T>,
    max_draws: usize,
) -> (Vec<FeasibleDraw<T>>, usize) {
    let mut found = Vec::with_capacity(count);
    let mut next = 0usize;
    while found.len() < count && next < max_draws {
        let end = (next + FILTER_CHUNK).min(max_draws);
        let batch: Vec<Option<FeasibleDraw<T>>> = (next..end)
            .into_par_iter()
            .map(|d| {
                let x0 = model.to_shifted_state(&model.sample_initial_state(seed, d as u64));
                match solve_verified(model, spec, &x0, tightened, options) {
                    Outcome::Kept(solution) => Some(FeasibleDraw { draw: d as u64, x0, solution }),
                    _ => None,
                }
            })
            .collect();
        found.extend(batch.into_iter().flatten());
        next = end;
    }
    found.truncate(count);
    let consumed = if found.len() == count && count > 0 { found[count - 1].draw as usize + 1 } else { next };
    (found, consumed)
}

impl Dataset {
    pub fn row_width(&self) -> usize {
        self.manifest.row_width
    }

    fn data_block(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.records.len() * self.row_width() * 8);
        for r in &self.records {
            for v in r.x0.iter().chain(r.useq.as_slice()).chain(std::iter::once(&r.cost)) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes the manifest to `path` and the data block next to it with
    /// extension `.bin`; returns the block path.
    pub fn write(&mut self, path: &Path) -> Result<PathBuf, DataError> {
        let bin = path.with_extension("bin");
        self.manifest.data_file = bin.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        fs::write(path, text).map_err(|e| io_err(path, e))?;
        fs::write(&bin, self.data_block()).map_err(|e| io_err(&bin, e))?;
        Ok(bin)
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let manifest: Manifest = serde_path_to_error::deserialize(de)
            .map_err(|e| DataError::Manifest(format!("at `{}`: {}", e.path(), e.inner())))?;
        if manifest.format != DATASET_FORMAT {
            return Err(DataError::Manifest(format!("unsupported format `{}`", manifest.format)));
        }
        let (n_x, n_u, n) = (manifest.n_x, manifest.n_u, manifest.horizon);
        if n_u == 0 || manifest.row_width != n_x + n_u * n + 1 {
            return Err(DataError::Manifest(format!(
                "row_width {} does not match n_x + n_u·N + 1 = {}",
                manifest.row_width,
                n_x + n_u * n + 1
            )));
        }
        let bin = path.parent().unwrap_or(Path::new("")).join(&manifest.data_file);
        let bytes = fs::read(&bin).map_err(|e| io_err(&bin, e))?;
        let expected = manifest.rows * manifest.row_width * 8;
        if bytes.len() != expected {
            return Err(DataError::Size { expected, got: bytes.len() });
        }
        let rows_diag: Vec<&SolveDiag> = manifest.solves.iter().filter(|s| s.row.is_some()).collect();
        let mut records = Vec::with_capacity(manifest.rows);
        for (i, chunk) in bytes.chunks_exact(manifest.row_width * 8).enumerate() {
            let row: Vec<f64> = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            let (draw, status) = match rows_diag.get(i) {
                Some(d) => (d.draw, if d.status == "max_iters" { SolveStatus::MaxIters } else { SolveStatus::Converged }),
                None => (i as u64, SolveStatus::Converged),
            };
            records.push(Record {
                draw,
                x0: row[..n_x].to_vec(),
                useq: InputSequence::new(n_u, row[n_x..n_x + n_u * n].to_vec()),
                cost: row[n_x + n_u * n],
                status,
            });
        }
        Ok(Self { manifest, records })
    }
}

/// Aggregates for one mode over a batch of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAggregate {
    pub mode: Mode,
    pub runs: usize,
    pub safe_runs: usize,
    pub percent_safe: f64,
    pub steps: usize,
    pub nn_accepted_steps: usize,
    pub candidate_steps: usize,
    pub percent_candidate: f64,
    /// Reason percentages over candidate-applied steps; a step can count
    /// toward several reasons.
    pub percent_input: f64,
    pub percent_state: f64,
    pub percent_terminal: f64,
    pub percent_cost: f64,
    pub terminal_clamps: usize,
    pub diverged_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub benchmark: String,
    pub modes: Vec<ModeAggregate>,
}

fn percent(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        100.0 * a as f64 / b as f64
    }
}

/// Aggregates logs of one benchmark, grouped by mode.
pub fn aggregate_report(logs: &[RunLog]) -> Result<Report, DataError> {
    let first = logs.first().ok_or(DataError::NoLogs)?;
    let benchmark = first.summary.benchmark.clone();
    if let Some(other) = logs.iter().find(|l| l.summary.benchmark != benchmark) {
        return Err(DataError::MixedBenchmarks(benchmark, other.summary.benchmark.clone()));
    }
    let mut modes = Vec::new();
    for mode in [Mode::NaiveNn, Mode::SafetyAugmented, Mode::OnlineSolver] {
        let runs: Vec<&RunLog> = logs.iter().filter(|l| l.summary.mode == mode).collect();
        if runs.is_empty() {
            continue;
        }
        let sum = |f: &dyn Fn(&RunLog) -> usize| runs.iter().map(|l| f(l)).sum::<usize>();
        let safe_runs = sum(&|l| l.summary.safe as usize);
        let steps = sum(&|l| l.summary.steps);
        let candidate = sum(&|l| l.summary.candidate_applied);
        modes.push(ModeAggregate {
            mode,
            runs: runs.len(),
            safe_runs,
            percent_safe: percent(safe_runs, runs.len()),
            steps,
            nn_accepted_steps: sum(&|l| l.summary.nn_accepted),
            candidate_steps: candidate,
            percent_candidate: percent(candidate, sum(&|l| l.summary.nn_accepted + l.summary.candidate_applied)),
            percent_input: percent(sum(&|l| l.summary.reasons.input), candidate),
            percent_state: percent(sum(&|l| l.summary.reasons.state), candidate),
            percent_terminal: percent(sum(&|l| l.summary.reasons.terminal), candidate),
            percent_cost: percent(sum(&|l| l.summary.reasons.cost), candidate),
            terminal_clamps: sum(&|l| l.summary.terminal_clamps),
            diverged_runs: sum(&|l| l.summary.diverged_at.is_some() as usize),
        });
    }
    Ok(Report { benchmark, modes })
}

/// Fixed-width rendering: one row per benchmark.
pub fn render_table(reports: &[Report]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |p| format!("{p:.1}"));
    let mut out = String::new();
    let _ = writeln!(out, "{:<14} | {:>10} {:>10} {:>10} | {:>10} {:>10} {:>10} {:>10}", "", "% safe", "", "", "candidate", "reason", "", "");
    let _ = writeln!(
        out,
        "{:<14} | {:>10} {:>10} {:>10} | {:>10} {:>10} {:>10} {:>10}",
        "benchmark", "naive", "safe", "solver", "applied %", "state %", "terminal %", "cost %"
    );
    let _ = writeln!(out, "{}", "-".repeat(14 + 3 + 32 + 3 + 43));
    for r in reports {
        let get = |m: Mode| r.modes.iter().find(|a| a.mode == m);
        let safe = get(Mode::SafetyAugmented);
        let _ = writeln!(
            out,
            "{:<14} | {:>10} {:>10} {:>10} | {:>10} {:>10} {:>10} {:>10}",
            r.benchmark,
            cell(get(Mode::NaiveNn).map(|a| a.percent_safe)),
            cell(safe.map(|a| a.percent_safe)),
            cell(get(Mode::OnlineSolver).map(|a| a.percent_safe)),
            cell(safe.map(|a| a.percent_candidate)),
            cell(safe.map(|a| a.percent_state)),
            cell(safe.map(|a| a.percent_terminal)),
            cell(safe.map(|a| a.percent_cost)),
        );
    }
    out
}
