//! Pipeline configuration: strict JSON with an explicit version field.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closure::Regularization;
use crate::error::{Result, SromError};
use crate::fem::{FomSettings, InitialConditionSpec};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Physics {
    pub nu: f64,
    /// Training window `[0, t_final]`.
    pub t_final: f64,
    pub dt: f64,
    pub n_elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reduction {
    pub r: usize,
    pub gap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_trajectories: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Held-out initial conditions for the prediction study.
    pub n_test: usize,
    /// Prediction horizon `[0, horizon]`.
    pub horizon: f64,
    /// Trajectories fitted individually in the estimator study.
    pub n_single: usize,
    pub estimator_regularization: Regularization,
    pub ensemble_size: usize,
    pub ensemble_repetitions: usize,
    pub percentile_levels: Vec<f64>,
    pub sweep_r: Vec<usize>,
    pub sweep_gaps: Vec<usize>,
    pub n_sweep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub physics: Physics,
    pub initial_condition: InitialConditionSpec,
    pub reduction: Reduction,
    pub data: DataConfig,
    pub regression: Regularization,
    pub study: StudyConfig,
}

fn invalid(msg: impl Into<String>) -> SromError {
    SromError::Config(msg.into())
}

fn is_multiple(x: f64, step: f64) -> bool {
    let q = x / step;
    q.round() >= 1.0 && (q - q.round()).abs() < 1e-9 * q.max(1.0)
}

impl PipelineConfig {
    /// Desk-scale defaults at the reference physics.
    pub fn desk() -> Self {
        Self {
            version: CONFIG_VERSION,
            physics: Physics {
                nu: 0.002,
                t_final: 2.0,
                dt: 0.005,
                n_elements: 256,
            },
            initial_condition: InitialConditionSpec::default(),
            reduction: Reduction { r: 10, gap: 5 },
            data: DataConfig {
                n_trajectories: 200,
                seed: 20220101,
                dir: None,
            },
            regression: Regularization::Lcurve { n_mesh: 100 },
            study: StudyConfig {
                n_test: 20,
                horizon: 4.0,
                n_single: 20,
                estimator_regularization: Regularization::None,
                ensemble_size: 100,
                ensemble_repetitions: 20,
                percentile_levels: vec![25.0, 75.0, 95.0],
                sweep_r: vec![6, 8, 10, 12, 14, 16],
                sweep_gaps: (1..=15).collect(),
                n_sweep: 50,
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SromError::io(path, e))?;
        Self::from_json(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(invalid(format!(
                "unsupported version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let p = &self.physics;
        if !(p.nu > 0.0) || !p.nu.is_finite() {
            return Err(invalid("physics.nu must be positive"));
        }
        if !(p.dt > 0.0) || !(p.t_final > 0.0) {
            return Err(invalid("physics.dt and physics.t_final must be positive"));
        }
        if !is_multiple(p.t_final, p.dt) {
            return Err(invalid("physics.t_final must be a whole number of steps"));
        }
        if p.n_elements < 2 {
            return Err(invalid("physics.n_elements must be at least 2"));
        }
        self.initial_condition
            .validate()
            .map_err(|e| invalid(format!("initial_condition: {e}")))?;
        let n_steps = (p.t_final / p.dt).round() as usize;
        let red = &self.reduction;
        if red.r == 0 || red.r > p.n_elements + 1 {
            return Err(invalid("reduction.r must lie in 1..=n_nodes"));
        }
        if red.gap == 0 || red.gap > n_steps {
            return Err(invalid("reduction.gap must lie in 1..=number of steps"));
        }
        if self.data.n_trajectories == 0 {
            return Err(invalid("data.n_trajectories must be positive"));
        }
        validate_regularization(&self.regression, "regression")?;
        let s = &self.study;
        validate_regularization(&s.estimator_regularization, "study.estimator_regularization")?;
        if s.n_test == 0 || s.n_single == 0 || s.n_sweep == 0 {
            return Err(invalid("study counts must be positive"));
        }
        if s.ensemble_size == 0 || s.ensemble_repetitions == 0 {
            return Err(invalid("ensemble sizes must be positive"));
        }
        if !(s.horizon > 0.0) || !is_multiple(s.horizon, p.dt) {
            return Err(invalid("study.horizon must be a positive whole number of steps"));
        }
        if s.percentile_levels.iter().any(|q| !(0.0..=100.0).contains(q))
            || s.percentile_levels.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(invalid("percentile levels must be increasing within [0, 100]"));
        }
        if s.sweep_r.iter().any(|&r| r == 0 || r > p.n_elements + 1) {
            return Err(invalid("study.sweep_r entries must lie in 1..=n_nodes"));
        }
        if s.sweep_gaps.iter().any(|&g| g == 0 || g > n_steps) {
            return Err(invalid("study.sweep_gaps entries must lie in 1..=number of steps"));
        }
        Ok(())
    }

    pub fn fom_settings(&self) -> FomSettings {
        FomSettings {
            nu: self.physics.nu,
            dt: self.physics.dt,
            t_final: self.physics.t_final,
        }
    }

    pub fn horizon_settings(&self) -> FomSettings {
        FomSettings {
            t_final: self.study.horizon,
            ..self.fom_settings()
        }
    }

    /// Hash of everything that determines the FOM data (physics and the
    /// initial-condition law); datasets are compatible iff these agree.
    pub fn dataset_hash(&self) -> String {
        let key = serde_json::to_vec(&(&self.physics, &self.initial_condition)).expect("serialises");
        hex::encode(Sha256::digest(key))
    }
}

fn validate_regularization(reg: &Regularization, field: &str) -> Result<()> {
    match *reg {
        Regularization::None => Ok(()),
        Regularization::Fixed { lambda } if lambda >= 0.0 && lambda.is_finite() => Ok(()),
        Regularization::Lcurve { n_mesh } if n_mesh >= 3 => Ok(()),
        _ => Err(invalid(format!("{field}: λ must be ≥ 0 and the mesh at least 3 points"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate_and_roundtrip() {
        let cfg = PipelineConfig::desk();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut value: serde_json::Value = serde_json::from_str(&PipelineConfig::desk().to_json()).unwrap();
        value["physics"]["viscosity"] = serde_json::json!(1.0);
        assert!(matches!(
            PipelineConfig::from_json(&value.to_string()),
            Err(SromError::Config(_))
        ));
    }

    #[test]
    fn range_checks() {
        let base = PipelineConfig::desk();
        let mut bad = base.clone();
        bad.physics.nu = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = base.clone();
        bad.physics.t_final = 2.0025;
        assert!(bad.validate().is_err());
        let mut bad = base.clone();
        bad.reduction.gap = 0;
        assert!(bad.validate().is_err());
        let mut bad = base.clone();
        bad.version = 2;
        assert!(bad.validate().is_err());
        let mut bad = base.clone();
        bad.study.percentile_levels = vec![75.0, 25.0];
        assert!(bad.validate().is_err());
        let mut bad = base;
        bad.regression = Regularization::Fixed { lambda: -1.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_hash_tracks_physics_only() {
        let a = PipelineConfig::desk();
        let mut b = a.clone();
        b.reduction.r = 6;
        b.data.seed = 1;
        assert_eq!(a.dataset_hash(), b.dataset_hash());
        b.physics.nu = 0.003;
        assert_ne!(a.dataset_hash(), b.dataset_hash());
    }
}
