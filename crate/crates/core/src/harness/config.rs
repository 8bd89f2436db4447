//! Run configuration: a sectioned TOML file, with command-line overrides
//! applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::losses::Smoothing;
use crate::metrics::DEFAULT_ALPHAS;
use crate::model::ModelConfig;
use crate::parallel::Parallelism;
use crate::spatial::GraphVariant;
use crate::synth::SyntheticSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_w: usize,
    pub d_v: usize,
    pub d_o: usize,
    pub latent: usize,
    /// Per-direction GRU hidden size, shared by the query and temporal encoders
    /// unless `text_hidden` is set.
    pub hidden: usize,
    pub text_hidden: Option<usize>,
    pub temporal_layers: usize,
    pub dropout: f64,
    /// Optional word-vector file in the GloVe text format.
    pub embeddings: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_w: 300,
            d_v: 1024,
            d_o: 2048,
            latent: 256,
            hidden: 256,
            text_hidden: None,
            temporal_layers: 2,
            dropout: 0.5,
            embeddings: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub variant: GraphVariant,
    pub iterations: usize,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            variant: GraphVariant::Full,
            iterations: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingKind {
    Onehot,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub smoothing: SmoothingKind,
    pub sigma_pos: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            smoothing: SmoothingKind::Onehot,
            sigma_pos: 1.0,
        }
    }
}

impl LossSection {
    pub fn smoothing(&self) -> Smoothing {
        match self.smoothing {
            SmoothingKind::Onehot => Smoothing::Onehot,
            SmoothingKind::Gaussian => Smoothing::Gaussian { sigma: self.sigma_pos },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimizerSection {
            lr: a.learning_rate,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
        }
    }
}

impl OptimizerSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluate on both splits every this many epochs (and after the last).
    pub eval_every: usize,
    pub parallelism: Parallelism,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 6,
            epochs: 20,
            eval_every: 1,
            parallelism: Parallelism::Rayon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub alphas: Vec<f64>,
    pub swap_degenerate: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            alphas: DEFAULT_ALPHAS.to_vec(),
            swap_degenerate: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Dataset directory holding `manifest.json`.
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Report destination; JSON, with a `.csv` sibling where applicable.
    pub report: Option<PathBuf>,
    /// Per-pair prediction dump (JSON Lines).
    pub predictions: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub graph: GraphSection,
    pub loss: LossSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
    pub synthetic: SyntheticSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Desk-scale settings for the synthetic task.
    pub fn synthetic_default() -> Self {
        RunConfig {
            model: ModelSection {
                d_w: 16,
                d_v: 16,
                d_o: 16,
                latent: 32,
                hidden: 32,
                text_hidden: Some(16),
                ..ModelSection::default()
            },
            optimizer: OptimizerSection {
                lr: 3e-3,
                ..OptimizerSection::default()
            },
            train: TrainSection {
                batch_size: 8,
                epochs: 40,
                ..TrainSection::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        for (name, v) in [
            ("model.d_w", m.d_w),
            ("model.d_v", m.d_v),
            ("model.d_o", m.d_o),
            ("model.latent", m.latent),
            ("model.hidden", m.hidden),
            ("model.text_hidden", m.text_hidden.unwrap_or(1)),
            ("model.temporal_layers", m.temporal_layers),
            ("train.batch_size", self.train.batch_size),
            ("train.eval_every", self.train.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", self.optimizer.lr)));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", m.dropout)));
        }
        if !(self.loss.sigma_pos > 0.0) {
            return Err(Error::Config("loss.sigma_pos must be positive".into()));
        }
        if self.eval.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("eval.alphas must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            d_w: m.d_w,
            text_hidden: m.text_hidden.unwrap_or(m.hidden),
            d_v: m.d_v,
            d_o: m.d_o,
            latent: m.latent,
            hidden: m.hidden,
            temporal_layers: m.temporal_layers,
            dropout: m.dropout,
            variant: self.graph.variant,
            iterations: self.graph.iterations,
        }
    }

    pub fn require_path<'a>(&self, p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        p.as_deref().ok_or_else(|| Error::Config(format!("paths.{key} is not set")))
    }
}
