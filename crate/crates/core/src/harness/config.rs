//! Run configuration: one TOML file with `generator`, `evaluator`, `planner`
//! and `inference` sections. Omitted keys take the desk defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::evaluator::{EvaluatorConfig, MetricVersion};
use crate::planner::PlannerConfig;
use crate::scenario::GenConfig;

/// Selection and analysis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Select with the EMA teacher rather than the student.
    pub use_teacher: bool,
    /// Aggregate reported by evaluation commands.
    pub version: MetricVersion,
    pub oracle_ks: Vec<usize>,
    pub heading_bins: usize,
    /// Random picks per scene for the Monte-Carlo baseline.
    pub random_samples: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            use_teacher: true,
            version: MetricVersion::V2,
            oracle_ks: vec![1, 4, 16, 256],
            heading_bins: 36,
            random_samples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuprimConfig {
    pub generator: GenConfig,
    pub evaluator: EvaluatorConfig,
    pub planner: PlannerConfig,
    pub inference: InferenceConfig,
}

impl Default for SuprimConfig {
    /// Desk-sized planner; every other section at its defaults.
    fn default() -> Self {
        Self {
            generator: GenConfig::default(),
            evaluator: EvaluatorConfig::default(),
            planner: PlannerConfig::desk(),
            inference: InferenceConfig::default(),
        }
    }
}

/// Overlays `top` onto `base`, recursing into tables.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::InvalidConfig(e.to_string())
}

impl SuprimConfig {
    /// Parses TOML text layered over [`SuprimConfig::default`]; unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let user: toml::Value = toml::from_str(text).map_err(parse_err)?;
        let mut base = toml::Value::try_from(Self::default()).map_err(parse_err)?;
        merge(&mut base, user);
        let cfg: Self = base.try_into().map_err(parse_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, HarnessError> {
        toml::to_string_pretty(self).map_err(parse_err)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.generator.validate().map_err(parse_err)?;
        self.evaluator.validate().map_err(HarnessError::InvalidConfig)?;
        self.planner.validate().map_err(parse_err)?;
        let inf = &self.inference;
        if inf.oracle_ks.is_empty() || inf.oracle_ks.contains(&0) {
            return Err(HarnessError::InvalidConfig("oracle_ks must be non-empty and positive".into()));
        }
        if inf.heading_bins == 0 || inf.random_samples == 0 {
            return Err(HarnessError::InvalidConfig("heading_bins and random_samples must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
