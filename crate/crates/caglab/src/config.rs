//! Experiment configuration.
//!
//! One TOML file drives the whole pipeline. Unknown keys are rejected, and
//! every derived artifact records the hash of the effective config so stale
//! mixes of outputs are refused downstream.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::guidance::{MixingSpace, Wiring};
use crate::policy::TrainConfig;
use crate::suites::{BiasProfile, SuiteKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub kind: SuiteKind,
    pub scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub cond: TrainConfig,
    pub va: TrainConfig,
    pub dropout: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    /// Guidance scale used by eval unless swept.
    pub omega: f64,
    pub space: MixingSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub omegas: Vec<f64>,
    pub wiring: Wiring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub base_seed: u64,
    /// Trials per task per evaluation replica.
    pub trials: usize,
    /// Number of evaluation seed replicas; rows are kept per replica.
    pub eval_seeds: usize,
    pub out_dir: PathBuf,
    pub suites: Vec<SuiteSpec>,
    pub bias: BiasProfile,
    pub train: TrainSection,
    pub guidance: GuidanceSection,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    /// The shipped default experiment: full-size suites, strongly biased
    /// dataset, omega 1.5, sweep bracketing it.
    pub fn default_config() -> Self {
        ExperimentConfig {
            base_seed: 7,
            trials: 50,
            eval_seeds: 5,
            out_dir: PathBuf::from("runs/default"),
            suites: vec![
                SuiteSpec {
                    kind: SuiteKind::Spatial,
                    scenes: 6,
                },
                SuiteSpec {
                    kind: SuiteKind::Object,
                    scenes: 4,
                },
                SuiteSpec {
                    kind: SuiteKind::Long,
                    scenes: 4,
                },
                SuiteSpec {
                    kind: SuiteKind::Ood,
                    scenes: 6,
                },
            ],
            bias: BiasProfile::default(),
            train: TrainSection {
                cond: TrainConfig::default(),
                va: TrainConfig::default(),
                dropout: TrainConfig {
                    language_dropout_prob: 0.5,
                    ..TrainConfig::default()
                },
            },
            guidance: GuidanceSection {
                omega: 1.5,
                space: MixingSpace::Logit,
            },
            sweep: SweepSection {
                omegas: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 8.0],
                wiring: Wiring::Va,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.trials == 0 {
            return Err(ConfigError::Invalid("trials must be positive".into()));
        }
        if self.eval_seeds == 0 {
            return Err(ConfigError::Invalid("eval_seeds must be positive".into()));
        }
        if self.suites.is_empty() || self.suites.iter().any(|s| s.scenes == 0) {
            return Err(ConfigError::Invalid(
                "suites must list at least one kind with a positive scene count".into(),
            ));
        }
        self.bias
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, cfg) in [
            ("train.cond", &self.train.cond),
            ("train.va", &self.train.va),
            ("train.dropout", &self.train.dropout),
        ] {
            cfg.validate()
                .map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        if !self.guidance.omega.is_finite() || self.guidance.omega < 0.0 {
            return Err(ConfigError::Invalid(
                "guidance.omega must be finite and non-negative".into(),
            ));
        }
        if self.sweep.omegas.is_empty() {
            return Err(ConfigError::Invalid("sweep.omegas must be non-empty".into()));
        }
        if self
            .sweep
            .omegas
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(ConfigError::Invalid(
                "sweep.omegas must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Hash of the effective config (after CLI overrides), recorded in the
    /// manifest so downstream commands refuse mixed outputs.
    pub fn content_hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex(&digest)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let config = ExperimentConfig::default_config();
        config.validate().unwrap();
        let text = toml::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
        assert_eq!(config.content_hash(), back.content_hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = toml::to_string_pretty(&ExperimentConfig::default_config()).unwrap();
        text.push_str("\nmystery_knob = 3\n");
        let err = toml::from_str::<ExperimentConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("mystery_knob"));
    }

    #[test]
    fn bad_suite_kind_names_the_field() {
        let text = toml::to_string_pretty(&ExperimentConfig::default_config())
            .unwrap()
            .replace("kind = \"spatial\"", "kind = \"spatail\"");
        let err = toml::from_str::<ExperimentConfig>(&text).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("spatail"), "{message}");
    }

    #[test]
    fn override_changes_hash() {
        let config = ExperimentConfig::default_config();
        let mut tweaked = config.clone();
        tweaked.base_seed += 1;
        assert_ne!(config.content_hash(), tweaked.content_hash());
    }
}
