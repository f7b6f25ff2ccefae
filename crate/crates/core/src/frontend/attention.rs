//! Scaled dot-product, multi-head and convolutional time-frequency attention.

use super::config::{AttentionConfig, AttentionKind, TimeScope};
use super::names;
use crate::autodiff::{Graph, Padding, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic attention weights, `[..., Tq, Tk]`.
    pub weights: Var,
}

/// `softmax(Q K^T / sqrt(d_k)) V` over the last two axes; leading axes are
/// batch axes and must agree.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<AttentionOutput> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    let r = sq.len();
    if r < 2 || sk.len() != r || sv.len() != r {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: sq,
            right: sk,
        });
    }
    let d_k = sq[r - 1];
    if d_k == 0 {
        return Err(Error::invalid("attention", "key dimension is zero"));
    }
    if sk[r - 1] != d_k || sk[r - 2] != sv[r - 2] || sq[..r - 2] != sk[..r - 2] || sk[..r - 2] != sv[..r - 2] {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: sq,
            right: sk,
        });
    }
    let kt = g.transpose(k, r - 2, r - 1)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = g.softmax(scores, r - 1)?;
    let output = g.matmul(weights, v)?;
    Ok(AttentionOutput { output, weights })
}

/// Query, key and value projections of one channel.
#[derive(Debug, Clone, Copy)]
pub struct Projected {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// Output of one attention application, with the pieces the invariants
/// are stated on.
#[derive(Debug, Clone)]
pub struct AttentionTerm {
    /// Same shape as the module input.
    pub output: Var,
    /// Attention weights of every head / conv channel and axis.
    pub weights: Vec<Var>,
    /// Conv-attention only: `[N, h, T, F]` time-axis outputs.
    pub time: Option<Var>,
    /// Conv-attention only: frequency-axis outputs transposed back to `[N, h, T, F]`.
    pub freq: Option<Var>,
    /// Conv-attention only: channel concatenation fed to the output convolution.
    pub concat: Option<Var>,
}

/// Shifts a `[S, ...]` tensor `n` places along the leading axis, filling with zeros.
fn shift_leading(g: &mut Graph, x: Var, n: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let s = shape[0];
    if n >= s {
        return g.input(Tensor::zeros(&shape));
    }
    let mut zshape = shape.clone();
    zshape[0] = n;
    let zeros = g.input(Tensor::zeros(&zshape))?;
    let kept = g.slice(x, 0, 0, s - n)?;
    g.concat(&[zeros, kept], 0)
}

/// Extends keys/values `[S, ..., T, D]` with the frames of the two previous
/// stacks along the time axis, giving `[S, ..., 3T, D]`.
pub fn window_previous_stacks(g: &mut Graph, x: Var) -> Result<Var> {
    let r = g.shape(x).len();
    let prev2 = shift_leading(g, x, 2)?;
    let prev1 = shift_leading(g, x, 1)?;
    g.concat(&[prev2, prev1, x], r - 2)
}

fn time_kv(g: &mut Graph, p: Projected, scope: TimeScope) -> Result<(Var, Var)> {
    match scope {
        TimeScope::Stack => Ok((p.k, p.v)),
        TimeScope::SlidingWindow => Ok((window_previous_stacks(g, p.k)?, window_previous_stacks(g, p.v)?)),
    }
}

/// Linear projection `[S, T, D] -> [S, h, T, d_k]`.
fn split_heads(g: &mut Graph, x: Var, w: Var, heads: usize) -> Result<Var> {
    let y = g.matmul(x, w)?;
    let s = g.shape(y).to_vec();
    let (batch, t, d) = (s[0], s[1], s[2]);
    if d % heads != 0 {
        return Err(Error::invalid("multi_head_attention", format!("width {d} not divisible by {heads} heads")));
    }
    let y = g.reshape(y, &[batch, t, heads, d / heads])?;
    g.permute(y, &[0, 2, 1, 3])
}

pub fn mha_project(g: &mut Graph, params: &ParamStore, x: Var, cfg: &AttentionConfig) -> Result<Projected> {
    let mut proj = |name: &str| -> Result<Var> {
        let w = g.param_from(params, name)?;
        split_heads(g, x, w, cfg.heads)
    };
    Ok(Projected {
        q: proj(names::WQ)?,
        k: proj(names::WK)?,
        v: proj(names::WV)?,
    })
}

/// Per-head attention on projected inputs, concatenation and `W^O`.
pub fn mha_attend(g: &mut Graph, params: &ParamStore, query: Projected, kv: Projected, scope: TimeScope) -> Result<AttentionTerm> {
    let (k, v) = time_kv(g, kv, scope)?;
    let att = scaled_dot_attention(g, query.q, k, v)?;
    // [S, h, T, dk] -> [S, T, h*dk]
    let y = g.permute(att.output, &[0, 2, 1, 3])?;
    let s = g.shape(y).to_vec();
    let y = g.reshape(y, &[s[0], s[1], s[2] * s[3]])?;
    let wo = g.param_from(params, names::WO)?;
    let output = g.matmul(y, wo)?;
    Ok(AttentionTerm {
        output,
        weights: vec![att.weights],
        time: None,
        freq: None,
        concat: None,
    })
}

/// Multi-head attention on `[S, T, D]` inputs.
pub fn multi_head_attention(
    g: &mut Graph,
    params: &ParamStore,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
) -> Result<AttentionTerm> {
    if !cfg.model_dim.is_multiple_of(cfg.heads) {
        return Err(Error::invalid("multi_head_attention", "model_dim not divisible by heads"));
    }
    let pq = mha_project(g, params, q, cfg)?;
    let pk = mha_project(g, params, k, cfg)?;
    let pv = mha_project(g, params, v, cfg)?;
    let query = Projected { q: pq.q, k: pq.k, v: pq.v };
    let kv = Projected { q: pk.q, k: pk.k, v: pv.v };
    mha_attend(g, params, query, kv, TimeScope::Stack)
}

/// Convolutional projections `[N, C, T, F] -> [N, h, T, F]` (kernel `k x k`,
/// stride 1, same padding).
pub fn conv_project(g: &mut Graph, params: &ParamStore, x: Var) -> Result<Projected> {
    let mut proj = |name: &str| -> Result<Var> {
        let w = g.param_from(params, name)?;
        g.conv2d(x, w, None, (1, 1), Padding::Same)
    };
    Ok(Projected {
        q: proj(names::WQ)?,
        k: proj(names::WK)?,
        v: proj(names::WV)?,
    })
}

/// Time attention on each conv channel, frequency attention on the transposed
/// maps (2-D only), channel concatenation and the output convolution `W^O`.
pub fn conv_attend(
    g: &mut Graph,
    params: &ParamStore,
    query: Projected,
    kv: Projected,
    kind: AttentionKind,
    scope: TimeScope,
) -> Result<AttentionTerm> {
    let (k, v) = time_kv(g, kv, scope)?;
    let time = scaled_dot_attention(g, query.q, k, v)?;
    let mut weights = vec![time.weights];
    let (freq, concat) = match kind {
        AttentionKind::Conv2d => {
            let qt = g.transpose(query.q, 2, 3)?;
            let kt = g.transpose(kv.k, 2, 3)?;
            let vt = g.transpose(kv.v, 2, 3)?;
            let f = scaled_dot_attention(g, qt, kt, vt)?;
            weights.push(f.weights);
            let back = g.transpose(f.output, 2, 3)?;
            let cat = g.concat(&[time.output, back], 1)?;
            (Some(back), cat)
        }
        AttentionKind::Conv1d => (None, time.output),
        AttentionKind::MultiHead => {
            return Err(Error::invalid("conv_attention", "multi-head kind passed to conv attention"));
        }
    };
    let wo = g.param_from(params, names::WO)?;
    let output = g.conv2d(concat, wo, None, (1, 1), Padding::Same)?;
    Ok(AttentionTerm {
        output,
        weights,
        time: Some(time.output),
        freq,
        concat: Some(concat),
    })
}

/// 2-D (or time-only 1-D) conv-attention on `[N, C, T, F]` inputs.
pub fn conv_attention_2d(
    g: &mut Graph,
    params: &ParamStore,
    q: Var,
    k: Var,
    v: Var,
    kind: AttentionKind,
) -> Result<AttentionTerm> {
    let pq = conv_project(g, params, q)?;
    let (pk, pv) = if k == q && v == q {
        (pq, pq)
    } else {
        (conv_project(g, params, k)?, conv_project(g, params, v)?)
    };
    let kv = Projected { q: pk.q, k: pk.k, v: pv.v };
    conv_attend(g, params, pq, kv, kind, TimeScope::Stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_example() {
        let mut g = Graph::new(Precision::F64);
        let q = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let k = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let v = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        // Row 0: weights softmax([1/sqrt2, 0]) evaluated directly.
        let a = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = a / (a + 1.0);
        let row0 = [w0 * 1.0 + (1.0 - w0) * 3.0, w0 * 2.0 + (1.0 - w0) * 4.0];
        let y = g.value(out.output).data();
        assert!((y[0] - row0[0]).abs() < 1e-12 && (y[1] - row0[1]).abs() < 1e-12);
        assert!((y[0] - 1.6604).abs() < 1e-4 && (y[1] - 2.6604).abs() < 1e-4);
    }

    #[test]
    fn zero_query_averages_values() {
        let mut g = Graph::new(Precision::F64);
        let q = g.input(Tensor::zeros(&[3, 4])).unwrap();
        let k = g.input(Tensor::from_fn(&[5, 4], |i| (i as f64).sin())).unwrap();
        let vt = Tensor::from_fn(&[5, 2], |i| i as f64);
        let v = g.input(vt.clone()).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let mean: f64 = (0..5).map(|j| vt.data()[j * 2 + c]).sum::<f64>() / 5.0;
                assert!((g.value(out.output).data()[r * 2 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_rows_rejected() {
        let mut g = Graph::new(Precision::F64);
        let q = g.input(Tensor::zeros(&[3, 4])).unwrap();
        let k = g.input(Tensor::zeros(&[5, 4])).unwrap();
        let v = g.input(Tensor::zeros(&[4, 2])).unwrap();
        assert!(scaled_dot_attention(&mut g, q, k, v).is_err());
    }

    #[test]
    fn window_prepends_previous_stacks() {
        let mut g = Graph::new(Precision::F64);
        let x = g.input(Tensor::from_fn(&[3, 1, 2], |i| i as f64 + 1.0)).unwrap();
        let w = window_previous_stacks(&mut g, x).unwrap();
        assert_eq!(g.shape(w), &[3, 3, 2]);
        let d = g.value(w).data();
        // stack 2 sees stacks 0, 1, 2
        assert_eq!(&d[12..18], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        // stack 0 sees two zero stacks then itself
        assert_eq!(&d[0..6], &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
    }
}
