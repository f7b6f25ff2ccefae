//! Input embedding, self/cross channel attention with summation merge, and
//! the normalized feed-forward block.

use rand::RngCore;

use super::attention::{conv_attend, conv_project, mha_attend, mha_project, AttentionTerm, Projected};
use super::config::{AttentionConfig, AttentionKind};
use super::names;
use crate::autodiff::{Graph, Padding, ParamStore, Var};
use crate::error::{Error, Result};

/// Frequency extent after `layers` strided "same" convolutions.
pub fn embedded_bins(bins: usize, stride: usize, layers: usize) -> usize {
    (0..layers).fold(bins, |b, _| b.div_ceil(stride))
}

/// Strided convolutional embedding `[S, C, T, B] -> [S, E, T, B']`; every
/// layer is a `k x k` convolution with stride on frequency only, then ReLU.
pub fn input_embedding(g: &mut Graph, params: &ParamStore, x: Var, cfg: &AttentionConfig) -> Result<Var> {
    let bins = g.shape(x)[3];
    let min_bins = cfg.embed_freq_stride.pow(cfg.embed_layers as u32);
    if bins < min_bins {
        return Err(Error::invalid(
            "input_embedding",
            format!("frequency extent {bins} is below {min_bins}"),
        ));
    }
    let mut h = x;
    for layer in 0..cfg.embed_layers {
        let (wn, bn) = names::embed_conv(layer);
        let w = g.param_from(params, &wn)?;
        let b = g.param_from(params, &bn)?;
        h = g.conv2d(h, w, Some(b), (1, cfg.embed_freq_stride), Padding::Same)?;
        h = g.relu(h)?;
    }
    Ok(h)
}

/// Embeds one microphone: conv embedding (when enabled) flattened per frame,
/// then a linear projection to `model_dim`. Returns `[S, T, D]`.
///
/// `conv_input` is `[S, 2, T, B]`, `flat_input` is `[S, T, 2B]`.
pub fn embed_channel(
    g: &mut Graph,
    params: &ParamStore,
    conv_input: Option<Var>,
    flat_input: Option<Var>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let frames = match (conv_input, flat_input) {
        (Some(x), _) => {
            let h = input_embedding(g, params, x, cfg)?;
            let s = g.shape(h).to_vec();
            let h = g.permute(h, &[0, 2, 1, 3])?;
            g.reshape(h, &[s[0], s[2], s[1] * s[3]])?
        }
        (None, Some(x)) => x,
        (None, None) => return Err(Error::invalid("embed_channel", "no input given")),
    };
    let w = g.param_from(params, names::PROJ_W)?;
    let b = g.param_from(params, names::PROJ_B)?;
    g.linear(frames, w, Some(b))
}

/// Result of [`channel_attention_merge`].
#[derive(Debug, Clone)]
pub struct MergeOutput {
    /// Sum of every self- and cross-attention output, `[S, T, D]`.
    pub merged: Var,
    pub self_terms: Vec<AttentionTerm>,
    /// `cross_terms[i]` attends with keys/values from channel `i` and queries
    /// from channel `(i + 1) % n`.
    pub cross_terms: Vec<AttentionTerm>,
}

/// Self- and cross-channel attention with shared weights, merged by summation.
///
/// Inputs are `[S, T, D]` per channel.
pub fn channel_attention_merge(
    g: &mut Graph,
    params: &ParamStore,
    embedded: &[Var],
    cfg: &AttentionConfig,
    kind: AttentionKind,
    cross: bool,
) -> Result<MergeOutput> {
    let n = embedded.len();
    if n == 0 {
        return Err(Error::invalid("channel_attention_merge", "no channels"));
    }
    if n == 1 && cross {
        log::warn!("cross-attention with a single channel degenerates to self-attention");
    }
    let projected: Vec<Projected> = embedded
        .iter()
        .map(|&x| match kind {
            AttentionKind::MultiHead => mha_project(g, params, x, cfg),
            AttentionKind::Conv2d | AttentionKind::Conv1d => {
                let s = g.shape(x).to_vec();
                let x4 = g.reshape(x, &[s[0], 1, s[1], s[2]])?;
                conv_project(g, params, x4)
            }
        })
        .collect::<Result<_>>()?;

    let attend = |g: &mut Graph, query: Projected, kv: Projected| -> Result<AttentionTerm> {
        let mut term = match kind {
            AttentionKind::MultiHead => mha_attend(g, params, query, kv, cfg.time_scope)?,
            _ => conv_attend(g, params, query, kv, kind, cfg.time_scope)?,
        };
        if kind != AttentionKind::MultiHead {
            let s = g.shape(term.output).to_vec();
            term.output = g.reshape(term.output, &[s[0], s[2], s[3]])?;
        }
        Ok(term)
    };

    let mut self_terms = Vec::with_capacity(n);
    let mut cross_terms = Vec::new();
    let mut outputs = Vec::with_capacity(2 * n);
    for c in 0..n {
        let s = attend(g, projected[c], projected[c])?;
        outputs.push(s.output);
        self_terms.push(s);
        if cross {
            let x = attend(g, projected[(c + 1) % n], projected[c])?;
            outputs.push(x.output);
            cross_terms.push(x);
        }
    }
    let merged = g.add_n(&outputs)?;
    Ok(MergeOutput {
        merged,
        self_terms,
        cross_terms,
    })
}

/// `Linear(x' + FFN(x'))` with `x' = LayerNorm(x)` and
/// `FFN(x') = W2 relu(W1 x' + b1) + b2`.
///
/// `x` is `[S, T, D]`; the frames of each stack are flattened before the final
/// linear layer, giving `[S, D]`. With `use_ffn == false` the FFN branch is
/// dropped and only the normalization and final linear layer remain.
pub fn ffn_block(
    g: &mut Graph,
    params: &ParamStore,
    x: Var,
    cfg: &AttentionConfig,
    use_ffn: bool,
    rng: Option<&mut (dyn RngCore + '_)>,
) -> Result<Var> {
    let gain = g.param_from(params, names::NORM_GAIN)?;
    let bias = g.param_from(params, names::NORM_BIAS)?;
    let axis = g.shape(x).len() - 1;
    let normed = g.layer_norm(x, gain, bias, axis)?;
    let y = if use_ffn {
        let w1 = g.param_from(params, names::FFN_W1)?;
        let b1 = g.param_from(params, names::FFN_B1)?;
        let w2 = g.param_from(params, names::FFN_W2)?;
        let b2 = g.param_from(params, names::FFN_B2)?;
        let h = g.linear(normed, w1, Some(b1))?;
        let h = g.relu(h)?;
        let f = g.linear(h, w2, Some(b2))?;
        let f = g.dropout(f, cfg.dropout, rng)?;
        g.add(normed, f)?
    } else {
        normed
    };
    let s = g.shape(y).to_vec();
    let flat = g.reshape(y, &[s[0], s[1] * s[2]])?;
    let w = g.param_from(params, names::OUT_W)?;
    let b = g.param_from(params, names::OUT_B)?;
    g.linear(flat, w, Some(b))
}
