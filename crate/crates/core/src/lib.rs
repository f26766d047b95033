//! Safety-augmented approximate nonlinear MPC.
//!
//! An approximator (typically a small MLP) proposes a full input sequence;
//! the [`guard`] accepts it only when its rollout is feasible and not more
//! expensive than a shifted safe candidate, so the closed loop inherits
//! constraint satisfaction and cost decrease from the candidate.
//!
//! The numerical core is generic over [`scalar::Real`] (`f32` or `f64`);
//! the aliases below fix it to `f64`.

pub mod benchmarks;
pub mod dataio;
pub mod guard;
pub mod linalg;
pub mod models;
pub mod ocp;
pub mod policy;
pub mod rollout;
pub mod scalar;
pub mod solver;

pub type Matrix = linalg::Matrix<f64>;
pub type Model = models::SystemModel<f64>;
pub type Spec = ocp::OcpSpec<f64>;
pub type Inputs = rollout::InputSequence<f64>;
