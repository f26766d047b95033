use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{chain_mass, quadcopter, stir_tank, BenchmarkId, ModelError, SampleBox, SystemModel};
use super::{ChainMass, Quadcopter, StirTank};
use crate::scalar::Real;

/// JSON model configuration: a benchmark plus optional overrides of the
/// compiled-in defaults.
///
/// ```json
/// { "benchmark": "quadcopter", "T_s": 0.1, "N": 10,
///   "overrides": { "d0": 80.0, "substeps": 20 } }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub benchmark: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masses: Option<usize>,
    #[serde(rename = "T_s", default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_box: Option<SampleBoxDoc>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBoxDoc {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ModelConfig {
    pub fn for_benchmark(id: BenchmarkId) -> Self {
        Self {
            benchmark: id.name().to_string(),
            masses: match id {
                BenchmarkId::ChainMass { masses } => Some(masses),
                _ => None,
            },
            ts: None,
            horizon: None,
            sample_box: None,
            overrides: BTreeMap::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Config(e.to_string()))
    }

    pub fn benchmark_id(&self) -> Result<BenchmarkId, ModelError> {
        let id = BenchmarkId::parse(&self.benchmark).ok_or_else(|| {
            ModelError::Config(format!(
                "unknown benchmark '{}'; valid: {}",
                self.benchmark,
                BenchmarkId::NAMES.join(", ")
            ))
        })?;
        Ok(match (id, self.masses) {
            (BenchmarkId::ChainMass { .. }, Some(masses)) => BenchmarkId::ChainMass { masses },
            (id, _) => id,
        })
    }

    pub fn build<T: Real>(&self) -> Result<SystemModel<T>, ModelError> {
        let id = self.benchmark_id()?;
        let mut ov = self.overrides.clone();
        let mut take = |key: &str, slot: &mut T| {
            if let Some(v) = ov.remove(key) {
                *slot = T::lit(v);
            }
        };
        let mut model = match id {
            BenchmarkId::StirTank => {
                let mut f = StirTank::<T>::default();
                take("theta", &mut f.theta);
                take("k", &mut f.k);
                take("M", &mut f.m);
                take("x_f", &mut f.x_f);
                take("x_c", &mut f.x_c);
                take("gamma", &mut f.gamma);
                stir_tank::model(f)?
            }
            BenchmarkId::Quadcopter => {
                let mut f = Quadcopter::<T>::default();
                take("d0", &mut f.d0);
                take("d1", &mut f.d1);
                take("n0", &mut f.n0);
                take("k_T", &mut f.k_t);
                take("m", &mut f.mass);
                take("g", &mut f.g);
                quadcopter::model(f)?
            }
            BenchmarkId::ChainMass { masses } => {
                let mut f = ChainMass::<T>::new(masses)?;
                take("D", &mut f.stiffness);
                take("L", &mut f.rest_length);
                take("m", &mut f.mass);
                chain_mass::model(f)?
            }
        };
        model = model.with_benchmark_id(Some(id));
        if let Some(s) = ov.remove("substeps") {
            if s < 1.0 || s.fract() != 0.0 {
                return Err(ModelError::Config(format!("substeps must be a positive integer, got {s}")));
            }
            model = model.with_substeps(s as usize)?;
        }
        if let Some(key) = ov.keys().next() {
            return Err(ModelError::Config(format!("unknown override '{key}' for {}", id.name())));
        }
        if let Some(ts) = self.ts {
            model = model.with_sampling_time(T::lit(ts))?;
        }
        if let Some(n) = self.horizon {
            model = model.with_horizon(n)?;
        }
        if let Some(b) = &self.sample_box {
            model = model.with_sample_box(SampleBox {
                lower: b.lower.iter().map(|v| T::lit(*v)).collect(),
                upper: b.upper.iter().map(|v| T::lit(*v)).collect(),
            })?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply() {
        let cfg = ModelConfig::from_json(
            r#"{"benchmark":"quadcopter","T_s":0.05,"N":12,"overrides":{"m":1.5,"substeps":4}}"#,
        )
        .unwrap();
        let m = cfg.build::<f64>().unwrap();
        assert_eq!(m.horizon(), 12);
        assert_eq!(m.substeps(), 4);
        assert_eq!(m.sampling_time(), 0.05);
        assert!((m.u_e()[2] - 9.81 * 1.5 / 0.91).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = ModelConfig::from_json(r#"{"benchmark":"stir_tank","overrides":{"zeta":1.0}}"#)
            .unwrap()
            .build::<f64>();
        assert!(matches!(bad, Err(ModelError::Config(msg)) if msg.contains("zeta")));
        assert!(ModelConfig::from_json(r#"{"benchmark":"stir_tank","extra":1}"#).is_err());
        let unknown = ModelConfig::from_json(r#"{"benchmark":"pendulum"}"#).unwrap().build::<f64>();
        assert!(matches!(unknown, Err(ModelError::Config(msg)) if msg.contains("stir_tank")));
    }
}
