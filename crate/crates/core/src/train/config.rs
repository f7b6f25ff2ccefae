use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::beamformer::GeometryConfig;
use crate::error::{Error, Result};
use crate::frontend::{AttentionConfig, BeamformerConfig, FeatureConfig, Frontend, Variant};
use crate::synth::SceneSpec;
use crate::tensor::Precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        for (field, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("optimizer.clip_norm", "must be positive"));
        }
        Ok(())
    }
}

/// Everything a training or evaluation run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub attention: AttentionConfig,
    pub beamformer: BeamformerConfig,
    pub geometry: GeometryConfig,
    pub features: FeatureConfig,
    pub scene: SceneSpec,
    /// Utterances rendered for training (and evaluation).
    pub dataset_size: usize,
    pub optimizer: AdamConfig,
    pub steps: usize,
    /// Utterances per step.
    pub batch_size: usize,
    /// Seeds initialization and dropout; the data seed is `scene.seed`.
    pub seed: u64,
    pub precision: Precision,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Conv2d,
            attention: AttentionConfig::desk(),
            beamformer: BeamformerConfig::default(),
            geometry: GeometryConfig::default(),
            features: FeatureConfig::default(),
            scene: SceneSpec::default(),
            dataset_size: 16,
            optimizer: AdamConfig::default(),
            steps: 2000,
            batch_size: 1,
            seed: 0,
            precision: Precision::F32,
            checkpoint: None,
            log: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every field; the first problem is reported with its path.
    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 {
            return Err(Error::config("dataset_size", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.batch_size > self.dataset_size {
            return Err(Error::config("batch_size", "exceeds dataset_size"));
        }
        self.optimizer.validate()?;
        self.scene.validate()?;
        if (self.scene.sample_rate - self.features.sample_rate).abs() > 1e-9 {
            return Err(Error::config("features.sample_rate", "differs from scene.sample_rate"));
        }
        if self.features.stack_stride == 0 {
            return Err(Error::config("features.stack_stride", "must be positive"));
        }
        let sizes = self
            .features
            .stft
            .sizes(self.features.sample_rate)
            .map_err(|e| Error::config("features.stft", e.to_string()))?;
        if sizes.window > self.scene.num_samples() {
            return Err(Error::config("scene.duration", "shorter than one analysis window"));
        }
        let picked = self.geometry.picked()?;
        if picked.num_mics() != self.attention.channels {
            return Err(Error::config(
                "geometry.pair",
                format!("{} mics picked, attention.channels is {}", picked.num_mics(), self.attention.channels),
            ));
        }
        self.frontend()?;
        Ok(())
    }

    pub fn frontend(&self) -> Result<Frontend> {
        Frontend::from_features(self.variant, self.attention.clone(), self.beamformer.clone(), &self.features)
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}
