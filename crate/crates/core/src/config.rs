//! Run configuration: one JSON document wiring every module together.
//!
//! Precedence is flags over file values over defaults; the CLI applies flag
//! overrides and then calls [`RunConfig::normalized`], which resolves the
//! coupled fields (query count, head count, image size) so each is stated
//! once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::perceiver::PerceiverConfig;
use crate::pipeline::{ModelConfig, ModelVariant, OptimizerProfile};
use crate::synthgen::DataConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub perceiver: PerceiverConfig,
    pub variant: ModelVariant,
    /// Optimizer profile name: `toy` or `paper`.
    pub profile: String,
    /// Number of query tokens / replicated class tokens.
    pub q: usize,
    /// Inference fusion weight.
    pub alpha: f64,
    pub seed: u64,
    /// Orthogonality regularizer toggle.
    pub use_orth: bool,
    pub data: DataConfig,
    /// Dataset directory (generated by `gen-data`, consumed by the rest).
    pub dataset: PathBuf,
    /// Output directory for checkpoints, logs, reports and heatmaps.
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            perceiver: PerceiverConfig::default(),
            variant: ModelVariant::T4,
            profile: "toy".into(),
            q: 8,
            alpha: 0.5,
            seed: 1024,
            use_orth: true,
            data: DataConfig::default(),
            dataset: PathBuf::from("benchmark"),
            out: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolve coupled fields: `q` drives the perceiver query count, the
    /// backbone's head count drives the perceiver's mask head axis, and the
    /// backbone's image size drives the generator.
    pub fn normalized(mut self) -> Self {
        self.perceiver.num_queries = self.q;
        self.perceiver.backbone_heads = self.backbone.num_heads;
        self.data.image_size = self.backbone.image_size;
        self
    }

    /// Validate every field and report all offenders at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Config(msg)) = self.backbone.validate() {
            problems.push(format!("backbone: {msg}"));
        }
        if let Err(Error::Config(msg)) = self.perceiver.validate() {
            problems.push(format!("perceiver: {msg}"));
        }
        if let Err(Error::Config(msg)) = self.data.validate() {
            problems.push(format!("data: {msg}"));
        }
        if self.q == 0 {
            problems.push("q: must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("alpha: {} must lie in [0, 1]", self.alpha));
        }
        if OptimizerProfile::by_name(&self.profile).is_err() {
            problems.push(format!("profile: unknown name {:?}", self.profile));
        }
        if self.perceiver.num_queries != self.q {
            problems.push(format!(
                "q: {} disagrees with perceiver.num_queries {}",
                self.q, self.perceiver.num_queries
            ));
        }
        if self.perceiver.backbone_heads != self.backbone.num_heads {
            problems.push(format!(
                "perceiver.backbone_heads: {} disagrees with backbone.num_heads {}",
                self.perceiver.backbone_heads, self.backbone.num_heads
            ));
        }
        if self.data.image_size != self.backbone.image_size {
            problems.push(format!(
                "data.image_size: {} disagrees with backbone.image_size {}",
                self.data.image_size, self.backbone.image_size
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    pub fn optimizer_profile(&self) -> Result<OptimizerProfile> {
        OptimizerProfile::by_name(&self.profile)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            perceiver: self.perceiver.clone(),
            variant: self.variant,
            use_orth: self.use_orth,
        }
    }

    /// Canonical one-line JSON for the effective-config log header.
    pub fn effective_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
