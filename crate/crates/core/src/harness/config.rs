use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{Ablations, ModelConfig};
use crate::progressive::PolicyConfig;

/// Which probabilities feed the AUC in an evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucScores {
    /// The distribution at each subject's decision stage.
    #[default]
    DecisionStage,
    /// Always the stage-3 distribution.
    FinalStage,
}

/// Full training configuration; SGD is the only optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub policy: PolicyConfig,
    pub ablations: Ablations,
    pub auc_scores: AucScores,
    /// Keep the epoch with the best validation AUC instead of the last.
    pub select_best: bool,
    /// Cohort generator settings used by `synth`.
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            model: ModelConfig::default(),
            policy: PolicyConfig::default(),
            ablations: Ablations::default(),
            auc_scores: AucScores::default(),
            select_best: true,
            synth: SynthConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.model.validate()?;
        self.policy.validate()?;
        self.synth.validate()
    }

    /// The policy with the ablation flags applied.
    pub fn effective_policy(&self) -> PolicyConfig {
        PolicyConfig {
            progressive: self.policy.progressive && !self.ablations.no_progressive,
            ..self.policy.clone()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                path: path.to_path_buf(),
                line: j.line(),
                msg: j.to_string(),
            },
            other => other,
        })
    }
}
