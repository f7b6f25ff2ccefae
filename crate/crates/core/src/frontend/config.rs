use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which frames the time attention may look at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScope {
    /// Queries, keys and values all come from the frames of one stack.
    #[default]
    Stack,
    /// Keys and values also cover the two preceding stacks (zero before the
    /// first), queries stay within the current stack.
    SlidingWindow,
}

/// Hyperparameters of the attention front-ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Input microphone channels.
    pub channels: usize,
    pub model_dim: usize,
    /// Attention heads (MHA) or convolution channels per projection (2-D).
    pub heads: usize,
    /// Per-head key width for MHA. The conv-attention key width is the full
    /// `model_dim`.
    pub key_dim: usize,
    pub ffn_dim: usize,
    pub kernel: usize,
    pub embed_channels: usize,
    pub embed_freq_stride: usize,
    pub embed_layers: usize,
    pub dropout: f64,
    pub time_scope: TimeScope,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl AttentionConfig {
    /// Small configuration used for tests and CPU training.
    pub fn desk() -> Self {
        Self {
            channels: 2,
            model_dim: 32,
            heads: 2,
            key_dim: 16,
            ffn_dim: 64,
            kernel: 3,
            embed_channels: 4,
            embed_freq_stride: 2,
            embed_layers: 2,
            dropout: 0.1,
            time_scope: TimeScope::Stack,
        }
    }

    /// Full-size multi-head attention model: dim 128, 4 heads of 32, FFN 1024.
    pub fn large_mha() -> Self {
        Self {
            model_dim: 128,
            heads: 4,
            key_dim: 32,
            ffn_dim: 1024,
            ..Self::desk()
        }
    }

    /// Full-size 2-D conv-attention model: dim 128, 4 conv channels, keys of
    /// width 128, FFN 1024.
    pub fn large_conv2d() -> Self {
        Self {
            model_dim: 128,
            heads: 4,
            key_dim: 128,
            ffn_dim: 1024,
            ..Self::desk()
        }
    }

    pub fn validate(&self, variant: Variant) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("key_dim", self.key_dim),
            ("ffn_dim", self.ffn_dim),
            ("kernel", self.kernel),
            ("embed_channels", self.embed_channels),
            ("embed_freq_stride", self.embed_freq_stride),
            ("embed_layers", self.embed_layers),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("attention.{field}"), "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("attention.dropout", "must lie in [0, 1)"));
        }
        if variant.spec().attention == AttentionKind::MultiHead && self.model_dim != self.heads * self.key_dim {
            return Err(Error::config(
                "attention.key_dim",
                format!(
                    "model_dim {} is not heads {} x key_dim {}",
                    self.model_dim, self.heads, self.key_dim
                ),
            ));
        }
        Ok(())
    }
}

/// How the neural beamformer filters start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamformerInit {
    /// Superdirective filters on the configured geometry.
    #[default]
    Superdirective,
    /// Glorot-uniform filters.
    Random,
}

/// Hyperparameters of the neural beamformer baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamformerConfig {
    /// Looking directions, equispaced in azimuth.
    pub directions: usize,
    /// Combiner kernel over (frames, bins); the direction streams are its
    /// input channels.
    pub combiner_kernel: [usize; 2],
    /// Diagonal loading for the superdirective solve.
    pub loading: f64,
    pub init: BeamformerInit,
    /// Direction selected by the initial combiner.
    pub look_index: usize,
}

impl Default for BeamformerConfig {
    fn default() -> Self {
        Self {
            directions: 7,
            combiner_kernel: [1, 1],
            loading: 1e-2,
            init: BeamformerInit::Superdirective,
            look_index: 0,
        }
    }
}

impl BeamformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.directions == 0 {
            return Err(Error::config("beamformer.directions", "must be positive"));
        }
        if self.combiner_kernel.contains(&0) {
            return Err(Error::config("beamformer.combiner_kernel", "extents must be positive"));
        }
        if !(self.loading >= 0.0 && self.loading.is_finite()) {
            return Err(Error::config("beamformer.loading", "must be finite and non-negative"));
        }
        if self.look_index >= self.directions {
            return Err(Error::config(
                "beamformer.look_index",
                format!("{} is not below directions {}", self.look_index, self.directions),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    MultiHead,
    /// Conv-attention over time and frequency.
    Conv2d,
    /// Conv-attention over time only.
    Conv1d,
}

/// Module switches that define a front-end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub beamformer: bool,
    pub attention: AttentionKind,
    pub input_embedding: bool,
    pub cross_attention: bool,
    pub ffn: bool,
}

/// Front-end variants: the two baselines, the proposed model and its four
/// ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    NeuralBeamformer,
    Mha,
    Conv2d,
    NoInputEmbedding,
    NoCrossAttention,
    NoFfn,
    Conv1d,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::NeuralBeamformer,
        Variant::Mha,
        Variant::Conv2d,
        Variant::NoInputEmbedding,
        Variant::NoCrossAttention,
        Variant::NoFfn,
        Variant::Conv1d,
    ];

    /// The full conv-attention model followed by its ablations.
    pub const ABLATIONS: [Variant; 5] = [
        Variant::Conv2d,
        Variant::NoInputEmbedding,
        Variant::NoCrossAttention,
        Variant::NoFfn,
        Variant::Conv1d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NeuralBeamformer => "neural_beamformer",
            Variant::Mha => "mha",
            Variant::Conv2d => "conv2d",
            Variant::NoInputEmbedding => "no_input_embedding",
            Variant::NoCrossAttention => "no_cross_attention",
            Variant::NoFfn => "no_ffn",
            Variant::Conv1d => "conv1d",
        }
    }

    /// Row label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::NeuralBeamformer => "Neural Beamformer",
            Variant::Mha => "Multi-Head Attention",
            Variant::Conv2d => "2D Conv-Attention",
            Variant::NoInputEmbedding => "- Input Embedding",
            Variant::NoCrossAttention => "- Cross-attention",
            Variant::NoFfn => "- FF Network Block",
            Variant::Conv1d => "- 2D + 1D Conv-Attention",
        }
    }

    pub fn spec(self) -> ModelSpec {
        let full = ModelSpec {
            beamformer: false,
            attention: AttentionKind::Conv2d,
            input_embedding: true,
            cross_attention: true,
            ffn: true,
        };
        match self {
            Variant::NeuralBeamformer => ModelSpec {
                beamformer: true,
                input_embedding: false,
                cross_attention: false,
                ffn: false,
                ..full
            },
            Variant::Mha => ModelSpec {
                attention: AttentionKind::MultiHead,
                ..full
            },
            Variant::Conv2d => full,
            Variant::NoInputEmbedding => ModelSpec {
                input_embedding: false,
                ..full
            },
            Variant::NoCrossAttention => ModelSpec {
                cross_attention: false,
                ..full
            },
            Variant::NoFfn => ModelSpec { ffn: false, ..full },
            Variant::Conv1d => ModelSpec {
                attention: AttentionKind::Conv1d,
                ..full
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts the snake-case names and the table labels.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == t || v.label().eq_ignore_ascii_case(t) || v.name().replace('_', "-") == t)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Resolves an ablation by name, returning the variant and its module
/// switches. Only the full conv-attention model and its four ablations are
/// accepted.
pub fn build_ablation(name: &str) -> Result<(Variant, ModelSpec)> {
    let v: Variant = name.parse()?;
    if !Variant::ABLATIONS.contains(&v) {
        return Err(Error::UnknownVariant(format!("{name} is not an ablation of conv2d")));
    }
    Ok((v, v.spec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("transformer".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn ablations_differ_in_one_module() {
        let full = Variant::Conv2d.spec();
        let (_, no_cross) = build_ablation("- Cross-attention").unwrap();
        assert!(!no_cross.cross_attention);
        assert_eq!(ModelSpec { cross_attention: true, ..no_cross }, full);
        let (_, one_d) = build_ablation("conv1d").unwrap();
        assert_eq!(one_d.attention, AttentionKind::Conv1d);
        assert_eq!(ModelSpec { attention: AttentionKind::Conv2d, ..one_d }, full);
        let (_, no_ffn) = build_ablation("- FF Network Block").unwrap();
        assert_eq!(ModelSpec { ffn: true, ..no_ffn }, full);
        let (_, no_emb) = build_ablation("no_input_embedding").unwrap();
        assert_eq!(ModelSpec { input_embedding: true, ..no_emb }, full);
        assert!(build_ablation("mha").is_err());
        assert!(build_ablation("bogus").is_err());
    }

    #[test]
    fn mha_width_must_divide() {
        let cfg = AttentionConfig { key_dim: 15, ..AttentionConfig::desk() };
        assert!(cfg.validate(Variant::Mha).is_err());
        assert!(cfg.validate(Variant::Conv2d).is_ok());
        assert_eq!(AttentionConfig::large_mha().model_dim / AttentionConfig::large_mha().heads, 32);
        AttentionConfig::large_mha().validate(Variant::Mha).unwrap();
    }

    #[test]
    fn baseline_skips_embedding() {
        assert!(!Variant::NeuralBeamformer.spec().input_embedding);
        assert!(Variant::NeuralBeamformer.spec().beamformer);
    }
}
