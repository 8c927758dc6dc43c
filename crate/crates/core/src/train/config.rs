use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::schedule::Schedule;
use crate::arch::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::{DType, ScanMode};

/// Training run settings. Serializes to one flat JSON object together with the
/// model spec fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelSpec,
    pub steps: usize,
    #[serde(default = "default_context")]
    pub context_length: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_final_ratio")]
    pub final_lr_ratio: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    /// Training corpus, read as bytes.
    pub data: PathBuf,
    #[serde(default)]
    pub eval_data: Option<PathBuf>,
    /// Save a checkpoint every this many steps, in addition to the final one.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub scan_mode: ScanMode,
}

fn default_context() -> usize {
    1024
}
fn default_warmup() -> f64 {
    0.01
}
fn default_final_ratio() -> f64 {
    0.1
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    0.5
}
fn default_dtype() -> DType {
    DType::F32
}

impl TrainConfig {
    pub fn new(model: ModelSpec, data: impl Into<PathBuf>) -> Self {
        TrainConfig {
            model,
            steps: 2000,
            context_length: default_context(),
            batch_size: 16,
            max_lr: 3e-3,
            warmup_fraction: default_warmup(),
            final_lr_ratio: default_final_ratio(),
            weight_decay: default_weight_decay(),
            grad_clip: default_clip(),
            seed: 0,
            dtype: default_dtype(),
            data: data.into(),
            eval_data: None,
            checkpoint_every: None,
            scan_mode: ScanMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 || self.context_length == 0 {
            return bad("steps, batch_size and context_length must be positive".into());
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return bad(format!(
                "final_lr_ratio must be in (0, 1], got {}",
                self.final_lr_ratio
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction must be in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if !(self.max_lr > 0.0) || !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("max_lr and grad_clip must be positive, weight_decay non-negative".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            steps: self.steps,
            max_lr: self.max_lr,
            warmup_fraction: self.warmup_fraction,
            final_ratio: self.final_lr_ratio,
        }
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.context_length) as u64
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; a relative `data`/`eval_data` path is taken
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut c = Self::from_json(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if c.data.is_relative() {
            c.data = base.join(&c.data);
        }
        if let Some(e) = c.eval_data.as_mut().filter(|e| e.is_relative()) {
            *e = base.join(&*e);
        }
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
