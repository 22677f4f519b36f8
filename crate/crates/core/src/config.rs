//! Run configuration shared by training, evaluation and the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::model::{ModelConfig, Scale};
use crate::selection::SelectionConfig;

/// Optimiser and schedule. The reference recipe trains for 100-350 epochs at
/// batch 16 with two accumulated batches and learning rates of 8e-6
/// (backbone) and 5e-4 (heads) on a pre-trained backbone; the toy defaults
/// train from scratch and need larger rates and far fewer epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Batches whose gradients are summed before one optimiser step.
    pub accumulate: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 2e-3,
            lr_heads: 2e-3,
            lr_min: 1e-5,
            weight_decay: 0.05,
            grad_clip: 1.5,
            batch_size: 8,
            epochs: 30,
            accumulate: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_backbone, self.lr_heads, self.lr_min, self.weight_decay];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::config("learning rates and weight decay must be finite and non-negative"));
        }
        if self.lr_min > self.lr_backbone.min(self.lr_heads) && self.lr_backbone.min(self.lr_heads) > 0.0 {
            return Err(Error::config("lr_min exceeds a peak learning rate"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.accumulate == 0 {
            return Err(Error::config("batch_size, epochs and accumulate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scale: Scale,
    pub pose_tokens: bool,
    pub selection: Option<SelectionConfig>,
    pub head: HeadConfig,
    pub optim: OptimConfig,
    /// Temporal views averaged at inference.
    pub views: usize,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Toy,
            pose_tokens: true,
            selection: None,
            head: HeadConfig::default(),
            optim: OptimConfig::default(),
            views: 3,
            seed: 0,
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        let mut m = ModelConfig::for_scale(self.scale);
        m.head = self.head.clone();
        m.pose_tokens = self.pose_tokens;
        m.selection = self.selection;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.optim.validate()?;
        if self.views == 0 {
            return Err(Error::config("views must be at least 1"));
        }
        Ok(())
    }
}
