//! Attention front-ends and the neural beamformer baseline behind one
//! interface.
//!
//! Every microphone's stacked features (`[S, F, B, 2]`, `F` frames per stack)
//! are embedded to `[S, F, D]`. Self- and cross-channel attention with shared
//! weights run over the frames of each stack, the outputs are summed into one
//! stream, normalized, passed through the residual FFN and flattened per
//! stack into a final linear layer, giving `[S, D]`.

pub mod attention;
pub mod config;
pub mod input;
pub mod layers;
pub mod model;

pub use config::{
    build_ablation, AttentionConfig, AttentionKind, BeamformerConfig, BeamformerInit, ModelSpec, TimeScope,
    Variant,
};
pub use input::{FeatureConfig, FrontendInput};
pub use model::{init_weights, Frontend, ForwardOutput, Init, ParamSpec};

/// Parameter names of the attention front-ends.
pub mod names {
    pub const WQ: &str = "attn.wq";
    pub const WK: &str = "attn.wk";
    pub const WV: &str = "attn.wv";
    pub const WO: &str = "attn.wo";
    pub const PROJ_W: &str = "embed.proj.weight";
    pub const PROJ_B: &str = "embed.proj.bias";
    pub const NORM_GAIN: &str = "norm.gain";
    pub const NORM_BIAS: &str = "norm.bias";
    pub const FFN_W1: &str = "ffn.w1";
    pub const FFN_B1: &str = "ffn.b1";
    pub const FFN_W2: &str = "ffn.w2";
    pub const FFN_B2: &str = "ffn.b2";
    pub const OUT_W: &str = "out.weight";
    pub const OUT_B: &str = "out.bias";

    /// Weight and bias names of embedding convolution `layer`.
    pub fn embed_conv(layer: usize) -> (String, String) {
        (format!("embed.conv{layer}.weight"), format!("embed.conv{layer}.bias"))
    }
}
