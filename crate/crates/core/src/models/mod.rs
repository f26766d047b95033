//! Continuous-time system models and the three benchmark plants.
//!
//! A [`SystemModel`] bundles a vector field `ẋ = f_c(x, u)` with the
//! regulation target `(x_e, u_e)`, sampling time, horizon and the box used to
//! draw initial conditions. Everything downstream of this module (costs,
//! terminal sets, network scaling) works in shifted coordinates
//! `x̃ = x − x_e`, `ũ = u − u_e`, so that the regulation target is the origin.

mod chain_mass;
mod config;
mod quadcopter;
mod stir_tank;

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::scalar::Real;

pub use chain_mass::{spring_force, ChainMass};
pub use config::ModelConfig;
pub use quadcopter::Quadcopter;
pub use stir_tank::StirTank;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("masses {first} and {second} coincide; spring force is singular")]
    CoincidentMasses { first: usize, second: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Which benchmark a model instantiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkId {
    StirTank,
    Quadcopter,
    ChainMass { masses: usize },
}

impl BenchmarkId {
    pub const NAMES: [&'static str; 3] = ["stir_tank", "quadcopter", "chain_mass"];

    pub fn name(&self) -> &'static str {
        match self {
            Self::StirTank => "stir_tank",
            Self::Quadcopter => "quadcopter",
            Self::ChainMass { .. } => "chain_mass",
        }
    }

    /// Parses a CLI name; `chain_mass` defaults to three masses.
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "stir_tank" | "stir-tank" => Some(Self::StirTank),
            "quadcopter" => Some(Self::Quadcopter),
            "chain_mass" | "chain-mass" => Some(Self::ChainMass { masses: 3 }),
            _ => name
                .strip_prefix("chain_mass_")
                .and_then(|m| m.parse().ok())
                .map(|masses| Self::ChainMass { masses }),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::StirTank => 2,
            Self::Quadcopter => 10,
            Self::ChainMass { masses } => 6 * masses - 9,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::StirTank => 1,
            Self::Quadcopter | Self::ChainMass { .. } => 3,
        }
    }
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ChainMass { masses } => write!(f, "chain_mass(M={masses})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Continuous-time dynamics `ẋ = f_c(x, u)` in original coordinates.
pub trait VectorField<T: Real>: Send + Sync + fmt::Debug {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;

    fn eval(&self, x: &[T], u: &[T], dx: &mut [T]) -> Result<(), ModelError>;

    /// Continuous Jacobians `a = ∂f_c/∂x` and `b = ∂f_c/∂u`.
    ///
    /// The default uses central differences; the benchmarks override it
    /// with the analytic derivatives.
    fn jacobian(
        &self,
        x: &[T],
        u: &[T],
        a: &mut Matrix<T>,
        b: &mut Matrix<T>,
    ) -> Result<(), ModelError> {
        let (nx, nu) = (self.n_x(), self.n_u());
        let mut fp = vec![T::zero(); nx];
        let mut fm = vec![T::zero(); nx];
        let mut xp = x.to_vec();
        let mut up = u.to_vec();
        let h0 = T::epsilon().cbrt();
        for j in 0..nx {
            let h = h0 * (T::one() + x[j].abs());
            xp[j] = x[j] + h;
            self.eval(&xp, u, &mut fp)?;
            xp[j] = x[j] - h;
            self.eval(&xp, u, &mut fm)?;
            xp[j] = x[j];
            for i in 0..nx {
                a[(i, j)] = (fp[i] - fm[i]) / (h + h);
            }
        }
        for j in 0..nu {
            let h = h0 * (T::one() + u[j].abs());
            up[j] = u[j] + h;
            self.eval(x, &up, &mut fp)?;
            up[j] = u[j] - h;
            self.eval(x, &up, &mut fm)?;
            up[j] = u[j];
            for i in 0..nx {
                b[(i, j)] = (fp[i] - fm[i]) / (h + h);
            }
        }
        Ok(())
    }
}

/// Axis-aligned box in shifted coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBox<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Real> SampleBox<T> {
    pub fn symmetric(half_widths: &[T]) -> Self {
        Self { lower: half_widths.iter().map(|h| -*h).collect(), upper: half_widths.to_vec() }
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| *v >= *lo && *v <= *hi)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
}

/// A plant: vector field, regulation target, discretization and horizon.
#[derive(Clone)]
pub struct SystemModel<T: Real> {
    benchmark: Option<BenchmarkId>,
    field: Arc<dyn VectorField<T>>,
    x_e: Vec<T>,
    u_e: Vec<T>,
    ts: T,
    horizon: usize,
    substeps: usize,
    sample_box: SampleBox<T>,
}

impl<T: Real> fmt::Debug for SystemModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("benchmark", &self.benchmark)
            .field("field", &self.field)
            .field("x_e", &self.x_e)
            .field("u_e", &self.u_e)
            .field("ts", &self.ts)
            .field("horizon", &self.horizon)
            .field("substeps", &self.substeps)
            .finish()
    }
}

impl<T: Real> SystemModel<T> {
    pub fn new(
        field: Arc<dyn VectorField<T>>,
        x_e: Vec<T>,
        u_e: Vec<T>,
        ts: T,
        horizon: usize,
        substeps: usize,
        sample_box: SampleBox<T>,
    ) -> Result<Self, ModelError> {
        let (nx, nu) = (field.n_x(), field.n_u());
        check_dim("x_e", nx, x_e.len())?;
        check_dim("u_e", nu, u_e.len())?;
        check_dim("sample_box.lower", nx, sample_box.lower.len())?;
        check_dim("sample_box.upper", nx, sample_box.upper.len())?;
        if !(ts > T::zero()) || !ts.is_finite() {
            return Err(ModelError::Config(format!("sampling time must be positive, got {ts}")));
        }
        if horizon == 0 {
            return Err(ModelError::Config("horizon must be at least 1".into()));
        }
        if substeps == 0 {
            return Err(ModelError::Config("substeps must be at least 1".into()));
        }
        if sample_box.lower.iter().zip(&sample_box.upper).any(|(l, u)| l > u) {
            return Err(ModelError::Config("sample box has lower > upper".into()));
        }
        Ok(Self { benchmark: None, field, x_e, u_e, ts, horizon, substeps, sample_box })
    }

    /// Compiled-in benchmark with the published parameters.
    pub fn benchmark(id: BenchmarkId) -> Result<Self, ModelError> {
        let mut model = match id {
            BenchmarkId::StirTank => stir_tank::model(StirTank::default())?,
            BenchmarkId::Quadcopter => quadcopter::model(Quadcopter::default())?,
            BenchmarkId::ChainMass { masses } => chain_mass::model(ChainMass::new(masses)?)?,
        };
        model.benchmark = Some(id);
        Ok(model)
    }

    pub fn with_benchmark_id(mut self, id: Option<BenchmarkId>) -> Self {
        self.benchmark = id;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self, ModelError> {
        if horizon == 0 {
            return Err(ModelError::Config("horizon must be at least 1".into()));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn with_sampling_time(mut self, ts: T) -> Result<Self, ModelError> {
        if !(ts > T::zero()) {
            return Err(ModelError::Config(format!("sampling time must be positive, got {ts}")));
        }
        self.ts = ts;
        Ok(self)
    }

    pub fn with_substeps(mut self, substeps: usize) -> Result<Self, ModelError> {
        if substeps == 0 {
            return Err(ModelError::Config("substeps must be at least 1".into()));
        }
        self.substeps = substeps;
        Ok(self)
    }

    pub fn with_sample_box(mut self, sample_box: SampleBox<T>) -> Result<Self, ModelError> {
        check_dim("sample_box.lower", self.n_x(), sample_box.lower.len())?;
        check_dim("sample_box.upper", self.n_x(), sample_box.upper.len())?;
        self.sample_box = sample_box;
        Ok(self)
    }

    pub fn benchmark_id(&self) -> Option<BenchmarkId> {
        self.benchmark
    }

    pub fn field(&self) -> &Arc<dyn VectorField<T>> {
        &self.field
    }

    pub fn n_x(&self) -> usize {
        self.field.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.field.n_u()
    }

    pub fn x_e(&self) -> &[T] {
        &self.x_e
    }

    pub fn u_e(&self) -> &[T] {
        &self.u_e
    }

    pub fn sampling_time(&self) -> T {
        self.ts
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn sample_box(&self) -> &SampleBox<T> {
        &self.sample_box
    }

    /// `f_c(x, u)` in original coordinates.
    pub fn dynamics(&self, x: &[T], u: &[T]) -> Result<Vec<T>, ModelError> {
        check_dim("state", self.n_x(), x.len())?;
        check_dim("input", self.n_u(), u.len())?;
        let mut dx = vec![T::zero(); self.n_x()];
        self.field.eval(x, u, &mut dx)?;
        Ok(dx)
    }

    pub fn to_shifted_state(&self, x: &[T]) -> Vec<T> {
        x.iter().zip(&self.x_e).map(|(a, b)| *a - *b).collect()
    }

    pub fn from_shifted_state(&self, x: &[T]) -> Vec<T> {
        x.iter().zip(&self.x_e).map(|(a, b)| *a + *b).collect()
    }

    pub fn to_shifted_input(&self, u: &[T]) -> Vec<T> {
        u.iter().zip(&self.u_e).map(|(a, b)| *a - *b).collect()
    }

    pub fn from_shifted_input(&self, u: &[T]) -> Vec<T> {
        u.iter().zip(&self.u_e).map(|(a, b)| *a + *b).collect()
    }

    /// Uniform draw from the sample box, returned in original coordinates.
    ///
    /// Each `(seed, draw)` pair owns an independent ChaCha stream, so a batch
    /// is reproducible regardless of how draws are scheduled across threads.
    pub fn sample_initial_state(&self, seed: u64, draw: u64) -> Vec<T> {
        let mut rng = stream_rng(seed, draw);
        let shifted: Vec<T> = self
            .sample_box
            .lower
            .iter()
            .zip(&self.sample_box.upper)
            .map(|(lo, hi)| {
                let r: f64 = rng.gen();
                *lo + (*hi - *lo) * T::lit(r)
            })
            .collect();
        self.from_shifted_state(&shifted)
    }
}

/// Per-draw RNG stream.
pub fn stream_rng(seed: u64, draw: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    rng
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::Dimension { what, expected, got })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_round_trip() {
        let m = SystemModel::<f64>::benchmark(BenchmarkId::StirTank).unwrap();
        let xe = m.x_e().to_vec();
        assert!(m.to_shifted_state(&xe).iter().all(|v| *v == 0.0));
        assert_eq!(m.from_shifted_state(&[0.0, 0.0]), xe);
        let x = [0.31, 0.7];
        let back = m.from_shifted_state(&m.to_shifted_state(&x));
        for (a, b) in back.iter().zip(x) {
            assert!((a - b).abs() <= 1e-16);
        }
        let u = [1.3];
        let back = m.from_shifted_input(&m.to_shifted_input(&u));
        assert!((back[0] - 1.3).abs() <= 1e-16);
    }

    #[test]
    fn benchmark_names_parse() {
        for name in BenchmarkId::NAMES {
            assert_eq!(BenchmarkId::parse(name).unwrap().name(), name);
        }
        assert_eq!(BenchmarkId::parse("chain_mass_4"), Some(BenchmarkId::ChainMass { masses: 4 }));
        assert_eq!(BenchmarkId::parse("pendulum"), None);
    }

    #[test]
    fn chain_mass_dimensions() {
        for masses in 3..7 {
            let id = BenchmarkId::ChainMass { masses };
            let m = SystemModel::<f64>::benchmark(id).unwrap();
            assert_eq!(m.n_x(), 6 * masses - 9);
            assert_eq!(m.n_u(), 3);
            assert_eq!(id.state_dim(), m.n_x());
        }
    }

    #[test]
    fn rejects_degenerate_configuration() {
        let m = SystemModel::<f64>::benchmark(BenchmarkId::StirTank).unwrap();
        assert!(m.clone().with_sampling_time(0.0).is_err());
        assert!(m.clone().with_horizon(0).is_err());
        assert!(m.clone().with_substeps(0).is_err());
        assert!(matches!(
            m.dynamics(&[0.1], &[0.0]),
            Err(ModelError::Dimension { what: "state", expected: 2, got: 1 })
        ));
    }

    #[test]
    fn sampling_is_deterministic_per_draw() {
        let m = SystemModel::<f64>::benchmark(BenchmarkId::Quadcopter).unwrap();
        assert_eq!(m.sample_initial_state(7, 3), m.sample_initial_state(7, 3));
        assert_ne!(m.sample_initial_state(7, 3), m.sample_initial_state(7, 4));
        assert_ne!(m.sample_initial_state(7, 3), m.sample_initial_state(8, 3));
    }
}
