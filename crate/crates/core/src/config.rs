//! Declarative run configuration shared by the CLI and the golden runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::approximator::{LatentFlowConfig, SecondStageConfig, SecondStageTraining};
use crate::error::{Error, Result};
use crate::evaluation::Protocol;
use crate::first_stage::{DecoderConfig, EncoderConfig, FirstStageConfig, FirstStageTraining, LossWeights};
use crate::nbody::{Scenario, ScenarioConfig, SplitCounts};
use crate::sampler::SamplerConfig;

/// Overrides the root that relative output paths resolve against.
pub const HOME_ENV: &str = "ENTITY_FLOW_HOME";

/// Resolves `path` against [`HOME_ENV`] when it is relative and the variable is set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(HOME_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub scenario: Scenario,
    /// Full physical setup. Scenario defaults apply when omitted.
    #[serde(default)]
    pub physics: Option<ScenarioConfig>,
    pub counts: SplitCounts,
    /// Observed frames at evaluation time.
    #[serde(default = "default_observed")]
    pub observed: usize,
}

fn default_observed() -> usize {
    10
}

impl DataSection {
    pub fn scenario_config(&self) -> ScenarioConfig {
        self.physics.clone().unwrap_or_else(|| ScenarioConfig::default_for(self.scenario))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecondStageSection {
    pub network: LatentFlowConfig,
    pub training: SecondStageTraining,
    pub inference: SamplerConfig,
}

impl SecondStageSection {
    pub fn stage_config(&self) -> SecondStageConfig {
        SecondStageConfig {
            flow: self.network.clone(),
            training: self.training.clone(),
        }
    }
}

/// Top-level document. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub first_stage: FirstStageConfig,
    #[serde(default)]
    pub second_stage: SecondStageSection,
    #[serde(default)]
    pub evaluation: Protocol,
}

impl RunConfig {
    /// Parses YAML or JSON (JSON is valid YAML, but `.json` files use the stricter parser).
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let cfg: RunConfig = if json {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?
        } else {
            serde_yaml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let physics = self.data.scenario_config();
        if physics.scenario != self.data.scenario {
            return Err(Error::Config(format!(
                "data.physics.scenario is `{}` but data.scenario is `{}`",
                physics.scenario, self.data.scenario
            )));
        }
        physics.validate()?;
        self.first_stage.validate()?;
        self.second_stage.stage_config().validate()?;
        self.second_stage.inference.validate()?;
        if self.data.observed == 0 || self.data.observed >= physics.frames {
            return Err(Error::Config(format!(
                "data.observed must be in 1..{}, got {}",
                physics.frames, self.data.observed
            )));
        }
        if self.first_stage.encoder.pool_size < physics.num_entities {
            return Err(Error::PoolExhausted {
                entities: physics.num_entities,
                pool: self.first_stage.encoder.pool_size,
            });
        }
        Ok(())
    }

    /// Every default made explicit.
    pub fn effective(&self) -> Self {
        let mut out = self.clone();
        out.data.physics = Some(self.data.scenario_config());
        out
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(&self.effective())?)
    }

    /// SHA-256 over the canonical JSON of the effective config.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(&self.effective())?;
        Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            observed: self.data.observed,
            seed: self.seed,
            ..self.evaluation.clone()
        }
    }

    /// Small spring setup that trains on a CPU in well under an hour.
    pub fn desk(scenario: Scenario) -> Self {
        let seed = 7;
        RunConfig {
            seed,
            data: DataSection {
                scenario,
                physics: None,
                counts: SplitCounts {
                    train: 500,
                    val: 100,
                    test: 100,
                },
                observed: 10,
            },
            first_stage: FirstStageConfig {
                encoder: EncoderConfig::default(),
                decoder: DecoderConfig::default(),
                loss: LossWeights::default(),
                training: FirstStageTraining {
                    epochs: 150,
                    batch_size: 128,
                    rotate: false,
                    seed,
                    ..FirstStageTraining::default()
                },
            },
            second_stage: SecondStageSection {
                network: LatentFlowConfig {
                    hidden: 64,
                    layers: 2,
                    heads: 4,
                    ..LatentFlowConfig::default()
                },
                training: SecondStageTraining {
                    epochs: 60,
                    batch_size: 4,
                    lr: 2e-3,
                    ema_decay: 0.995,
                    rotate: false,
                    seed,
                    ..SecondStageTraining::default()
                },
                inference: SamplerConfig {
                    seed,
                    k: 5,
                    ..SamplerConfig::default()
                },
            },
            evaluation: Protocol {
                k: 5,
                observed: 10,
                seed,
                ..Protocol::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_yaml_fills_defaults() {
        let cfg = RunConfig::parse("seed: 3\ndata:\n  scenario: spring\n  counts: {train: 4, val: 2, test: 2}\n", false).unwrap();
        assert_eq!(cfg.first_stage, FirstStageConfig::default());
        assert_eq!(cfg.data.scenario_config(), ScenarioConfig::default_for(Scenario::Spring));
        assert_eq!(cfg.protocol().seed, 3);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = "seed: 3\ndata:\n  scenario: spring\n  counts: {train: 4, val: 2, test: 2}\nfirst_stage:\n  encoder:\n    latents: 3\n";
        let err = RunConfig::parse(bad, false).unwrap_err();
        assert!(err.is_usage(), "{err}");
        let top = r#"{"seed": 1, "data": {"scenario": "spring", "counts": {"train": 1, "val": 1, "test": 1}}, "extra": 1}"#;
        assert!(RunConfig::parse(top, true).unwrap_err().is_usage());
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = RunConfig::desk(Scenario::Spring);
        let yaml = cfg.to_yaml().unwrap();
        let back = RunConfig::parse(&yaml, false).unwrap();
        assert_eq!(back, cfg.effective());
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn bad_horizon_is_config_error() {
        let mut cfg = RunConfig::desk(Scenario::Spring);
        cfg.data.observed = 30;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
