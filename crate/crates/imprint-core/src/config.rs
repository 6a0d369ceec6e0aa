//! Experiment configuration: one JSON document covering the training
//! hyperparameters, the manipulator spec, and the augmentation recipe,
//! plus a content hash tying artifacts back to the exact settings that
//! produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::Recipe;
use crate::losses::LossWeights;
use crate::manipulate::{Manipulator, ManipulatorKind};
use crate::networks::{ClassifierDesc, EncoderDesc};
use crate::real::Real;
use crate::{Error, Result};

/// Frozen manipulator identity: its parameters regenerate from this pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManipulatorSpec {
    pub kind: ManipulatorKind,
    pub seed: u64,
}

impl ManipulatorSpec {
    pub fn build<T: Real>(&self) -> Manipulator<T> {
        Manipulator::new(self.kind, self.seed)
    }
}

/// Full experiment configuration. `seed` and `manipulator` must be given;
/// every other field has the standard default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub manipulator: ManipulatorSpec,
    #[serde(default = "default_set_size")]
    pub set_size: usize,
    #[serde(default = "default_strength")]
    pub strength: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_lowpass_k")]
    pub lowpass_k: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub augmentation: Recipe,
    #[serde(default)]
    pub encoder: EncoderDesc,
    /// Only the passive-baseline variant reads this.
    #[serde(default)]
    pub classifier: ClassifierDesc,
    #[serde(default = "default_divergence_limit")]
    pub divergence_limit: f64,
}

fn default_set_size() -> usize {
    3
}
fn default_strength() -> f64 {
    0.30
}
fn default_lowpass_k() -> usize {
    50
}
fn default_learning_rate() -> f64 {
    1e-5
}
fn default_batch_size() -> usize {
    4
}
fn default_epochs() -> usize {
    10
}
fn default_divergence_limit() -> f64 {
    1e12
}

impl TrainConfig {
    /// A config with every defaultable field at its default.
    pub fn new(seed: u64, manipulator: ManipulatorSpec) -> Self {
        TrainConfig {
            seed,
            manipulator,
            set_size: default_set_size(),
            strength: default_strength(),
            weights: LossWeights::default(),
            lowpass_k: default_lowpass_k(),
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            augmentation: Recipe::none(),
            encoder: EncoderDesc::default(),
            classifier: ClassifierDesc::default(),
            divergence_limit: default_divergence_limit(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.set_size == 0 {
            return Err(Error::argument("set_size", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::argument("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::argument("epochs", "must be at least 1"));
        }
        if !self.strength.is_finite() || self.strength < 0.0 {
            return Err(Error::argument("strength", "must be finite and >= 0"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::argument("learning_rate", "must be finite and >= 0"));
        }
        if self.lowpass_k == 0 || self.lowpass_k > crate::SIDE {
            return Err(Error::argument(
                "lowpass_k",
                format!("must be in 1..={}", crate::SIDE),
            ));
        }
        if !(self.divergence_limit > 0.0) {
            return Err(Error::argument("divergence_limit", "must be positive"));
        }
        for step in &self.augmentation.steps {
            if !(0.0..=1.0).contains(&step.probability) {
                return Err(Error::argument("augmentation", "probability outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Content hash of the canonical JSON form; identical settings hash
    /// identically regardless of source formatting.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }

    /// Clone with one objective term disabled, for loss-removal studies.
    /// Accepts the `LossWeights` field names.
    pub fn drop_loss(&self, name: &str) -> Result<TrainConfig> {
        let mut out = self.clone();
        match name {
            "magnitude" => out.weights.magnitude = 0.0,
            "recovery" => out.weights.recovery = 0.0,
            "lowpass" => out.weights.lowpass = 0.0,
            "fake_similarity" => out.weights.fake_similarity = 0.0,
            "pairwise" => out.weights.pairwise = 0.0,
            other => {
                return Err(Error::argument(
                    "dropped",
                    format!(
                        "unknown loss {other:?}; expected one of magnitude, recovery, \
                         lowpass, fake_similarity, pairwise"
                    ),
                ))
            }
        }
        Ok(out)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Parses a config from a JSON string; serde errors (including missing
/// required fields) surface with the offending field named.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig =
        serde_json::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &TrainConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(path, text)?;
    Ok(())
}
