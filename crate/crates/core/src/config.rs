//! Experiment configuration: a TOML file that, together with the input
//! data and seed, fully determines a run. Every field has a default, so
//! an empty config runs the default synthetic world end to end.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

use crate::dataio::SyntheticConfig;
use crate::features::FeatureSpec;
use crate::predictor::{PredictionMode, RecalPolicy};
use crate::simnet::{Fault, FaultPlan, Schedule};
use crate::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config field {field}: {reason}")]
    Invalid { field: String, reason: String },
}

/// On-disk experiment configuration. See the repository README for the
/// documented schema; everything is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub mode: Option<PredictionMode>,
    pub data: DataSection,
    pub features: FeaturesSection,
    pub policy: PolicySection,
    pub schedule: ScheduleSection,
    pub baselines: BaselinesSection,
    pub faults: FaultsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// "synthetic" or "csv".
    pub source: String,
    /// CSV path (csv source only).
    pub path: Option<PathBuf>,
    /// Synthetic world parameters (synthetic source only); the seed
    /// defaults to the experiment seed.
    pub synthetic: Option<SyntheticSection>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            path: None,
            synthetic: None,
        }
    }
}

/// Mirrors [`SyntheticConfig`] with every field optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub days: Option<usize>,
    pub nodes: Option<usize>,
    pub base_level: Option<f64>,
    pub seasonal_amplitude: Option<f64>,
    pub seasonal_period: Option<f64>,
    pub cloud_ar: Option<f64>,
    pub cloud_noise: Option<f64>,
    pub obs_noise: Option<f64>,
    pub shading: Option<Vec<f64>>,
    pub coupling: Option<f64>,
    pub seed: Option<u64>,
}

impl SyntheticSection {
    pub fn resolve(&self, default_seed: u64) -> SyntheticConfig {
        let mut cfg = SyntheticConfig::default_world(self.seed.unwrap_or(default_seed));
        if let Some(v) = self.days {
            cfg.days = v;
        }
        if let Some(v) = self.nodes {
            cfg.nodes = v;
        }
        if let Some(v) = self.base_level {
            cfg.base_level = v;
        }
        if let Some(v) = self.seasonal_amplitude {
            cfg.seasonal_amplitude = v;
        }
        if let Some(v) = self.seasonal_period {
            cfg.seasonal_period = v;
        }
        if let Some(v) = self.cloud_ar {
            cfg.cloud_ar = v;
        }
        if let Some(v) = self.cloud_noise {
            cfg.cloud_noise = v;
        }
        if let Some(v) = self.obs_noise {
            cfg.obs_noise = v;
        }
        if let Some(v) = &self.shading {
            cfg.shading = v.clone();
        }
        if let Some(v) = self.coupling {
            cfg.coupling = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    pub self_lags: usize,
    /// (neighbor node id, lag count) pairs; ids must be 1..nodes in order.
    pub neighbor_lags: Option<Vec<(NodeId, usize)>>,
    pub env_lags: Vec<(String, usize)>,
    pub use_error: bool,
    pub use_derivative: bool,
    pub lead: usize,
    pub train_window: usize,
    pub recal_window: usize,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        Self {
            self_lags: 2,
            neighbor_lags: None, // one lag per non-master node
            env_lags: Vec::new(),
            use_error: false,
            use_derivative: false,
            lead: 2,
            train_window: 20,
            recal_window: 7,
        }
    }
}

impl FeaturesSection {
    /// Builds the feature spec, defaulting neighbor lags to one lag per
    /// non-master node of the dataset.
    pub fn resolve(&self, nodes: usize) -> FeatureSpec {
        let neighbor_lags = self
            .neighbor_lags
            .clone()
            .unwrap_or_else(|| (1..nodes as NodeId).map(|id| (id, 1)).collect());
        FeatureSpec {
            n_self_lags: self.self_lags,
            neighbor_lags,
            env_lags: self.env_lags.clone(),
            use_error: self.use_error,
            use_derivative: self.use_derivative,
            lead: self.lead,
            train_window: self.train_window,
            recal_window: self.recal_window,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    /// "periodic" or "error-threshold".
    pub kind: String,
    pub threshold: Option<f64>,
    pub min_new_days: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            kind: "periodic".into(),
            threshold: None,
            min_new_days: 4,
        }
    }
}

impl PolicySection {
    pub fn resolve(&self, recal_window: usize) -> Result<RecalPolicy, ConfigError> {
        match self.kind.as_str() {
            "periodic" => Ok(RecalPolicy::Periodic {
                window: recal_window,
            }),
            "error-threshold" => {
                let threshold = self.threshold.ok_or_else(|| ConfigError::Invalid {
                    field: "policy.threshold".into(),
                    reason: "required for error-threshold policy".into(),
                })?;
                Ok(RecalPolicy::ErrorThreshold {
                    threshold,
                    min_new_days: self.min_new_days,
                })
            }
            other => Err(ConfigError::Invalid {
                field: "policy.kind".into(),
                reason: format!("unknown policy {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub ticks_per_day: u64,
    pub timeout_ticks: u64,
    pub message_delay: u64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            ticks_per_day: 64,
            timeout_ticks: 50,
            message_delay: 1,
        }
    }
}

impl ScheduleSection {
    pub fn resolve(&self, total_days: usize, recal_window: usize) -> Schedule {
        Schedule {
            ticks_per_day: self.ticks_per_day,
            measure_interval: self.ticks_per_day,
            predict_interval: self.ticks_per_day,
            calibrate_interval: recal_window.max(1) as u64 * self.ticks_per_day,
            total_days,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselinesSection {
    pub enabled: bool,
    pub ewma_alpha: f64,
}

impl Default for BaselinesSection {
    fn default() -> Self {
        Self {
            enabled: true,
            ewma_alpha: crate::baselines::DEFAULT_EWMA_ALPHA,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultsSection {
    pub drop_probability: f64,
    pub inject: Vec<Fault>,
}

impl FaultsSection {
    pub fn resolve(&self) -> FaultPlan {
        FaultPlan {
            faults: self.inject.clone(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.data.source.as_str() {
            "synthetic" => {}
            "csv" => {
                if self.data.path.is_none() {
                    return Err(ConfigError::Invalid {
                        field: "data.path".into(),
                        reason: "required when data.source is \"csv\"".into(),
                    });
                }
            }
            other => {
                return Err(ConfigError::Invalid {
                    field: "data.source".into(),
                    reason: format!("unknown source {other:?} (use \"synthetic\" or \"csv\")"),
                })
            }
        }
        if !(0.0..=1.0).contains(&self.baselines.ewma_alpha) {
            return Err(ConfigError::Invalid {
                field: "baselines.ewma_alpha".into(),
                reason: "must be in [0, 1]".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.faults.drop_probability) {
            return Err(ConfigError::Invalid {
                field: "faults.drop_probability".into(),
                reason: "must be in [0, 1]".into(),
            });
        }
        self.policy.resolve(self.features.recal_window).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.data.source, "synthetic");
        assert_eq!(cfg.features.train_window, 20);
        assert!(cfg.baselines.enabled);
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"
seed = 7
mode = "shared-single"

[data]
source = "synthetic"

[data.synthetic]
days = 60
nodes = 3
coupling = 0.9

[features]
self_lags = 2
neighbor_lags = [[1, 1], [2, 1]]
env_lags = [["temperature", 1]]
lead = 2
train_window = 20
recal_window = 7

[policy]
kind = "error-threshold"
threshold = 4.5
min_new_days = 4

[faults]
drop_probability = 0.02

[[faults.inject]]
kind = "node-offline"
node = 2
from_tick = 100
until_tick = 200
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, Some(7));
        let synth = cfg.data.synthetic.as_ref().unwrap().resolve(7);
        assert_eq!(synth.days, 60);
        assert_eq!(synth.nodes, 3);
        let spec = cfg.features.resolve(3);
        assert_eq!(spec.neighbor_lags, vec![(1, 1), (2, 1)]);
        let policy = cfg.policy.resolve(7).unwrap();
        assert!(matches!(policy, RecalPolicy::ErrorThreshold { .. }));
        assert_eq!(cfg.faults.inject.len(), 1);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = ExperimentConfig::from_toml("environments = 3").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn csv_source_requires_a_path() {
        let cfg = ExperimentConfig::from_toml("[data]\nsource = \"csv\"").unwrap();
        match cfg.validate() {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "data.path"),
            other => panic!("expected invalid data.path, got {other:?}"),
        }
    }

    #[test]
    fn unknown_policy_kind_is_named() {
        let cfg = ExperimentConfig::from_toml("[policy]\nkind = \"always\"").unwrap();
        match cfg.validate() {
            Err(ConfigError::Invalid { field, reason }) => {
                assert_eq!(field, "policy.kind");
                assert!(reason.contains("always"));
            }
            other => panic!("expected invalid policy.kind, got {other:?}"),
        }
    }
}
