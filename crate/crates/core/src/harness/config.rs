use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::GRPOConfig;
use crate::msvq::{Codebook, CodebookKind};
use crate::policy::{Policy, PolicyConfig};
use crate::pretrain::{DatasetConfig, PretrainConfig};
use crate::rewards::RewardSpec;
use crate::sampler::SamplerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    pub kind: CodebookKind,
    pub seed: u64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            kind: CodebookKind::Lattice,
            seed: 0,
        }
    }
}

/// Every module's settings in one document. Absent sections and fields take
/// their desk defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub policy: PolicyConfig,
    pub codebook: CodebookConfig,
    pub dataset: DatasetConfig,
    pub pretrain: PretrainConfig,
    pub sampler: SamplerConfig,
    pub grpo: GRPOConfig,
    pub reward: RewardSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { "$".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config { path: p, message } => Error::Config {
                path: format!("{}: {p}", path.display()),
                message,
            },
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Section-level checks, reported with the section as the path.
    pub fn validate(&self) -> Result<()> {
        let at = |section: &str, r: Result<()>| {
            r.map_err(|e| Error::Config {
                path: section.into(),
                message: e.to_string(),
            })
        };
        at("policy", self.policy.validate())?;
        at("dataset", self.dataset.validate())?;
        at("pretrain", self.pretrain.validate())?;
        at("sampler", self.sampler.validate(self.policy.vocab))?;
        at("grpo", self.grpo.validate())?;
        at("reward", self.reward.validate())?;
        if self.dataset.n_classes != self.policy.n_classes {
            return Err(Error::Config {
                path: "dataset.n_classes".into(),
                message: format!(
                    "{} differs from policy.n_classes {}",
                    self.dataset.n_classes, self.policy.n_classes
                ),
            });
        }
        let (h, w) = self.policy.schedule.resolution();
        if (self.dataset.height, self.dataset.width) != (h, w) {
            return Err(Error::Config {
                path: "dataset.height".into(),
                message: format!(
                    "images are {}×{} but the schedule ends at {h}×{w}",
                    self.dataset.height, self.dataset.width
                ),
            });
        }
        Ok(())
    }

    pub fn build_policy(&self) -> Result<Policy> {
        let cb = Codebook::build(
            self.codebook.kind,
            self.codebook.seed,
            self.policy.vocab,
            self.policy.latent_dim,
        )?;
        Policy::new(self.policy.clone(), cb)
    }
}
