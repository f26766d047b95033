//! Approximators of the MPC policy: the tanh MLP read from a weight file and
//! the fixture policies used by the closed-loop tests.
//!
//! Networks map a shifted state `x̃` to a shifted input sequence `ũ` (row
//! major, `u_0` first). Inputs are normalized as `z = in_scale ⊙ (x̃ − in_offset)`
//! and outputs denormalized as `ũ = out_offset + out_scale ⊙ y`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::models::{stream_rng, SampleBox, SystemModel};
use crate::ocp::{OcpSpec, Polytope};
use crate::rollout::InputSequence;
use crate::scalar::Real;
use crate::solver::{solve_ocp, Init, SolveError, SolveOptions};

/// Relative tolerance for the stored probe outputs, loose enough for a
/// different `tanh` implementation on the writing side.
pub const PROBE_RTOL: f64 = 1e-9;

/// Number of probe states written by [`MlpPolicy::with_probe`].
pub const PROBE_STATES: usize = 16;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("weight file schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("layer {layer}: {message}")]
    LayerShape { layer: usize, message: String },
    #[error("{what} has length {got}, expected {expected}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("probe {index} disagrees with the stored output (max error {max_error:e})")]
    Probe { index: usize, max_error: f64 },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Solve(#[from] SolveError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightMeta {
    pub n_x: usize,
    pub n_u: usize,
    #[serde(rename = "N")]
    pub horizon: usize,
    pub benchmark: String,
    /// Validation tolerance the trainer reached on its held-out labels.
    pub training_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scaling<T> {
    pub in_offset: Vec<T>,
    pub in_scale: Vec<T>,
    pub out_offset: Vec<T>,
    pub out_scale: Vec<T>,
}

impl<T: Real> Scaling<T> {
    /// `[−1, 1]` normalization of the sample box on the input side and of the
    /// input box (repeated over the horizon) on the output side.
    pub fn from_boxes(sample_box: &SampleBox<T>, input_set: &Polytope<T>, horizon: usize) -> Self {
        let two = T::lit(2.0);
        let mut in_offset = Vec::new();
        let mut in_scale = Vec::new();
        for (lo, hi) in sample_box.lower.iter().zip(&sample_box.upper) {
            in_offset.push((*lo + *hi) / two);
            let w = *hi - *lo;
            in_scale.push(if w > T::zero() { two / w } else { T::one() });
        }
        let (ulo, uhi) = input_set.box_bounds();
        let mut off = Vec::new();
        let mut scale = Vec::new();
        for (lo, hi) in ulo.iter().zip(&uhi) {
            if lo.is_finite() && hi.is_finite() {
                off.push((*lo + *hi) / two);
                scale.push((*hi - *lo) / two);
            } else {
                off.push(T::zero());
                scale.push(T::one());
            }
        }
        let out_offset = (0..horizon).flat_map(|_| off.iter().copied()).collect();
        let out_scale = (0..horizon).flat_map(|_| scale.iter().copied()).collect();
        Self { in_offset, in_scale, out_offset, out_scale }
    }

    fn cast<U: Real>(&self) -> Scaling<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect();
        Scaling {
            in_offset: c(&self.in_offset),
            in_scale: c(&self.in_scale),
            out_offset: c(&self.out_offset),
            out_scale: c(&self.out_scale),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    /// Row-major `out × in`.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeDoc {
    pub inputs: Vec<Vec<f64>>,
    /// Raw network outputs before clamping.
    pub outputs: Vec<Vec<f64>>,
}

/// On-disk weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightFile {
    pub meta: WeightMeta,
    pub scaling: Scaling<f64>,
    pub layers: Vec<LayerDoc>,
    pub probe: ProbeDoc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Real> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

/// Fully connected tanh network with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy<T: Real> {
    meta: WeightMeta,
    scaling: Scaling<T>,
    layers: Vec<Layer<T>>,
    probe: ProbeDoc,
}

fn finite<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl<T: Real> MlpPolicy<T> {
    pub fn new(meta: WeightMeta, scaling: Scaling<T>, layers: Vec<Layer<T>>) -> Result<Self, PolicyError> {
        let p = Self { meta, scaling, layers, probe: ProbeDoc { inputs: Vec::new(), outputs: Vec::new() } };
        p.validate()?;
        Ok(p)
    }

    /// Glorot-uniform weights and zero biases; `hidden` lists the hidden widths.
    pub fn random(meta: WeightMeta, scaling: Scaling<T>, hidden: &[usize], seed: u64) -> Result<Self, PolicyError> {
        let mut widths = vec![meta.n_x];
        widths.extend_from_slice(hidden);
        widths.push(meta.n_u * meta.horizon);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let mut rng = stream_rng(seed, i as u64);
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| T::lit(rng.gen_range(-limit..=limit))).collect();
                Layer { w: Matrix::from_vec(w[1], w[0], data).expect("sized"), b: vec![T::zero(); w[1]] }
            })
            .collect();
        Self::new(meta, scaling, layers)
    }

    fn validate(&self) -> Result<(), PolicyError> {
        let m = &self.meta;
        let n_out = m.n_u * m.horizon;
        let s = &self.scaling;
        for (what, v, n) in [
            ("scaling.in_offset", &s.in_offset, m.n_x),
            ("scaling.in_scale", &s.in_scale, m.n_x),
            ("scaling.out_offset", &s.out_offset, n_out),
            ("scaling.out_scale", &s.out_scale, n_out),
        ] {
            if v.len() != n {
                return Err(PolicyError::Shape { what, expected: n, got: v.len() });
            }
            if !finite(v) {
                return Err(PolicyError::NonFinite(what.into()));
            }
        }
        if self.layers.is_empty() {
            return Err(PolicyError::LayerShape { layer: 0, message: "network has no layers".into() });
        }
        let mut width = m.n_x;
        for (i, l) in self.layers.iter().enumerate() {
            if l.w.cols() != width {
                return Err(PolicyError::LayerShape {
                    layer: i,
                    message: format!("weight has {} columns, previous width is {width}", l.w.cols()),
                });
            }
            if l.b.len() != l.w.rows() {
                return Err(PolicyError::LayerShape {
                    layer: i,
                    message: format!("bias has {} entries for {} rows", l.b.len(), l.w.rows()),
                });
            }
            if !l.w.is_finite() || !finite(&l.b) {
                return Err(PolicyError::NonFinite(format!("layers[{i}]")));
            }
            width = l.w.rows();
        }
        if width != n_out {
            return Err(PolicyError::LayerShape {
                layer: self.layers.len() - 1,
                message: format!("output width {width}, expected n_u·N = {n_out}"),
            });
        }
        Ok(())
    }

    pub fn meta(&self) -> &WeightMeta {
        &self.meta
    }

    pub fn scaling(&self) -> &Scaling<T> {
        &self.scaling
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn probe(&self) -> &ProbeDoc {
        &self.probe
    }

    pub fn n_x(&self) -> usize {
        self.meta.n_x
    }

    pub fn n_u(&self) -> usize {
        self.meta.n_u
    }

    pub fn horizon(&self) -> usize {
        self.meta.horizon
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.rows() * (l.w.cols() + 1)).sum()
    }

    /// Network output before clamping.
    pub fn forward_raw(&self, x: &[T]) -> Result<Vec<T>, PolicyError> {
        if x.len() != self.meta.n_x {
            return Err(PolicyError::Shape { what: "state", expected: self.meta.n_x, got: x.len() });
        }
        let s = &self.scaling;
        let mut z: Vec<T> = x.iter().zip(&s.in_offset).zip(&s.in_scale).map(|((v, o), k)| (*v - *o) * *k).collect();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = l.w.mul_vec(&z);
            for (a, b) in y.iter_mut().zip(&l.b) {
                *a += *b;
                if i < last {
                    *a = a.tanh();
                }
            }
            z = y;
        }
        let out: Vec<T> = z.iter().zip(&s.out_offset).zip(&s.out_scale).map(|((y, o), k)| *o + *k * *y).collect();
        if !finite(&out) {
            return Err(PolicyError::NonFinite("network output".into()));
        }
        Ok(out)
    }

    /// Input sequence proposed at `x`, clamped element-wise into the box of `input_set`.
    pub fn infer(&self, x: &[T], input_set: &Polytope<T>) -> Result<InputSequence<T>, PolicyError> {
        let mut useq = InputSequence::new(self.meta.n_u, self.forward_raw(x)?);
        for u in useq.as_mut_slice().chunks_mut(self.meta.n_u) {
            input_set.clamp_box(u);
        }
        Ok(useq)
    }

    /// Upper bound `C` with `‖infer(x₁) − infer(x₂)‖₂ ≤ C ‖x₁ − x₂‖₂`.
    pub fn lipschitz_bound(&self) -> T {
        let amax = |v: &[T]| v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
        let layers = self.layers.iter().fold(T::one(), |c, l| c * l.w.spectral_norm_bound());
        amax(&self.scaling.in_scale) * layers * amax(&self.scaling.out_scale)
    }

    /// Replaces the probe set with `count` states drawn uniformly from the
    /// normalized input box and their raw outputs.
    pub fn with_probe(mut self, count: usize, seed: u64) -> Result<Self, PolicyError> {
        let mut inputs = Vec::with_capacity(count);
        let mut outputs = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = stream_rng(seed, i as u64);
            let x: Vec<T> = self
                .scaling
                .in_offset
                .iter()
                .zip(&self.scaling.in_scale)
                .map(|(o, k)| *o + T::lit(rng.gen_range(-1.0..=1.0)) / *k)
                .collect();
            let y = self.forward_raw(&x)?;
            inputs.push(x.iter().map(|v| v.to_f64_lossy()).collect());
            outputs.push(y.iter().map(|v| v.to_f64_lossy()).collect());
        }
        self.probe = ProbeDoc { inputs, outputs };
        Ok(self)
    }

    /// Checks the stored probe outputs against this implementation.
    pub fn verify_probe(&self) -> Result<(), PolicyError> {
        if self.probe.inputs.len() != self.probe.outputs.len() {
            return Err(PolicyError::Schema {
                path: "probe".into(),
                message: format!("{} inputs but {} outputs", self.probe.inputs.len(), self.probe.outputs.len()),
            });
        }
        let tol = PROBE_RTOL.max(if std::mem::size_of::<T>() < 8 { 1e-4 } else { 0.0 });
        for (i, (x, want)) in self.probe.inputs.iter().zip(&self.probe.outputs).enumerate() {
            let xs: Vec<T> = x.iter().map(|v| T::lit(*v)).collect();
            let got = self.forward_raw(&xs)?;
            if got.len() != want.len() {
                return Err(PolicyError::Shape { what: "probe output", expected: got.len(), got: want.len() });
            }
            let max_error = got
                .iter()
                .zip(want)
                .map(|(g, w)| (g.to_f64_lossy() - w).abs() / (1.0 + w.abs()))
                .fold(0.0, f64::max);
            if !(max_error <= tol) {
                return Err(PolicyError::Probe { index: i, max_error });
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> WeightFile {
        WeightFile {
            meta: self.meta.clone(),
            scaling: self.scaling.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc {
                    w: l.w.to_rows().into_iter().map(|r| r.into_iter().map(|v| v.to_f64_lossy()).collect()).collect(),
                    b: l.b.iter().map(|v| v.to_f64_lossy()).collect(),
                })
                .collect(),
            probe: self.probe.clone(),
        }
    }

    pub fn from_file(file: WeightFile) -> Result<Self, PolicyError> {
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.iter().enumerate() {
            let rows: Vec<Vec<T>> = l.w.iter().map(|r| r.iter().map(|v| T::lit(*v)).collect()).collect();
            let w = Matrix::from_rows(&rows)
                .map_err(|e| PolicyError::LayerShape { layer: i, message: format!("weight matrix: {e}") })?;
            let w = if rows.is_empty() { Matrix::zeros(0, 0) } else { w };
            layers.push(Layer { w, b: l.b.iter().map(|v| T::lit(*v)).collect() });
        }
        let policy = Self { meta: file.meta, scaling: file.scaling.cast(), layers, probe: file.probe };
        policy.validate()?;
        policy.verify_probe()?;
        Ok(policy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("weight file serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: WeightFile = serde_path_to_error::deserialize(de).map_err(|e| PolicyError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Self::from_file(file)
    }
}

pub fn load_policy<T: Real>(path: &Path) -> Result<MlpPolicy<T>, PolicyError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PolicyError::Io { path: path.display().to_string(), message: e.to_string() })?;
    MlpPolicy::from_json(&text)
}

pub fn save_policy<T: Real>(policy: &MlpPolicy<T>, path: &Path) -> Result<(), PolicyError> {
    fs::write(path, policy.to_json())
        .map_err(|e| PolicyError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Anything that proposes a full shifted input sequence for a shifted state.
pub trait Approximator<T: Real> {
    fn propose(&mut self, x: &[T]) -> Result<InputSequence<T>, PolicyError>;

    fn name(&self) -> &str;
}

/// An [`MlpPolicy`] together with the input set its outputs are clamped into.
#[derive(Debug, Clone)]
pub struct NnApproximator<T: Real> {
    pub policy: MlpPolicy<T>,
    pub input_set: Polytope<T>,
}

impl<T: Real> Approximator<T> for NnApproximator<T> {
    fn propose(&mut self, x: &[T]) -> Result<InputSequence<T>, PolicyError> {
        self.policy.infer(x, &self.input_set)
    }

    fn name(&self) -> &str {
        "mlp"
    }
}

/// The same stage input at every stage, whatever the state.
#[derive(Debug, Clone)]
pub struct ConstantPolicy<T> {
    pub stage: Vec<T>,
    pub horizon: usize,
    pub label: String,
}

impl<T: Real> ConstantPolicy<T> {
    pub fn zero(n_u: usize, horizon: usize) -> Self {
        Self { stage: vec![T::zero(); n_u], horizon, label: "zero".into() }
    }

    /// Upper corner of the input box, or the lower corner where `toward[i]` is negative.
    pub fn adversarial(input_set: &Polytope<T>, horizon: usize, toward: &[T]) -> Self {
        let (lo, hi) = input_set.box_bounds();
        let stage = (0..lo.len())
            .map(|i| {
                let pick = if toward.get(i).is_some_and(|s| *s < T::zero()) { lo[i] } else { hi[i] };
                if pick.is_finite() {
                    pick
                } else {
                    T::zero()
                }
            })
            .collect();
        Self { stage, horizon, label: "adversarial".into() }
    }
}

impl<T: Real> Approximator<T> for ConstantPolicy<T> {
    fn propose(&mut self, x: &[T]) -> Result<InputSequence<T>, PolicyError> {
        let _ = x;
        Ok(InputSequence::constant(&self.stage, self.horizon))
    }

    fn name(&self) -> &str {
        &self.label
    }
}

/// Oracle that solves the MPC problem at every call, warm-started from its
/// own previous solution shifted by one stage.
#[derive(Debug, Clone)]
pub struct SolverReplay<T: Real> {
    model: SystemModel<T>,
    spec: OcpSpec<T>,
    options: SolveOptions<T>,
    tightened: bool,
    previous: Option<InputSequence<T>>,
}

impl<T: Real> SolverReplay<T> {
    pub fn new(model: SystemModel<T>, spec: OcpSpec<T>, options: SolveOptions<T>, tightened: bool) -> Self {
        Self { model, spec, options, tightened, previous: None }
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }
}

impl<T: Real> Approximator<T> for SolverReplay<T> {
    fn propose(&mut self, x: &[T]) -> Result<InputSequence<T>, PolicyError> {
        let init = match &self.previous {
            Some(prev) => {
                let last = prev.stage(prev.horizon() - 1).to_vec();
                Init::WarmStart(prev.shift_append(&last))
            }
            None => Init::TerminalControllerRollout,
        };
        let options = self.options.clone().with_init(init);
        let r = solve_ocp(&self.model, &self.spec, x, &options, self.tightened)?;
        if r.feasible() {
            self.previous = Some(r.useq.clone());
            Ok(r.useq)
        } else {
            Ok(self.previous.clone().unwrap_or(r.useq))
        }
    }

    fn name(&self) -> &str {
        "solver-replay"
    }
}
