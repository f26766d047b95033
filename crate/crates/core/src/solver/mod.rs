//! Nonlinear OCP solver, terminal-ingredient synthesis and Lipschitz tools.

pub mod lipschitz;
pub mod qp;
pub mod riccati;
pub mod sqp;
pub mod terminal;

pub use lipschitz::{estimate_lipschitz, lemma1_probe, Lemma1Report, LipschitzEstimate, ProbeError};
pub use qp::{solve_qp, QpError, QpSolution};
pub use riccati::{lqr_gain, solve_dare, RiccatiError};
pub use sqp::{
    solve_ocp, terminal_controller_rollout, Init, Prestabilize, SolveConfig, SolveError, SolveOptions, SolveResult,
    SolveStatus,
};
pub use terminal::{synth_terminal, verify_terminal, Certificate, TerminalError, TerminalSynthOptions};
