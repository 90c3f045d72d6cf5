use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ablation::Variant;
use crate::env::{EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::hygrpo::TrainerConfig;
use crate::policy::PolicyConfig;
use crate::pretrain::PretrainConfig;
use crate::rewards::RewardConfig;

/// Output cadence and evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    /// Steps between checkpoints; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Held-out tasks per task kind for evaluation.
    pub eval_tasks: usize,
    pub eval_group_size: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            checkpoint_every: 100,
            eval_tasks: 32,
            eval_group_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            variants: Variant::ALL.to_vec(),
        }
    }
}

/// Everything a run depends on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub reward: RewardConfig,
    pub pretrain: PretrainConfig,
    pub trainer: TrainerConfig,
    pub run: RunSettings,
    pub ablation: AblationSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            key: offending_key(text, &e).unwrap_or_else(|| "<file>".into()),
            reason: e.to_string().trim().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.reward.validate()?;
        self.pretrain.validate()?;
        self.trainer.validate()?;
        if self.run.eval_group_size < 1 {
            return Err(Error::Config {
                key: "run.eval_group_size".into(),
                reason: "must be positive".into(),
            });
        }
        let mix = &self.env.mix;
        let weights = [mix.text2pose, mix.image2pose, mix.qa];
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config {
                key: "env.mix".into(),
                reason: "weights must be non-negative with a positive sum".into(),
            });
        }
        Ok(())
    }

    pub fn environment(&self) -> Result<Environment> {
        Environment::new(self.env.clone())
    }

    /// SHA-256 over every setting except the output directory.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            out_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// `section.key` of an unknown-field error.
fn offending_key(text: &str, e: &toml::de::Error) -> Option<String> {
    let rest = e.message().split("unknown field `").nth(1)?;
    let key = rest.split('`').next()?;
    let before = &text[..e.span().map_or(0, |s| s.start).min(text.len())];
    let section = before
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim());
    Some(match section {
        Some(sec) => format!("{sec}.{key}"),
        None => key.to_string(),
    })
}
