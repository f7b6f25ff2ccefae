//! Finite-difference gradient suites for every primitive and every variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::head::{surrogate_loss, SurrogateHead};
use crate::autodiff::{grad_check, GradCheckReport, Graph, Padding, ParamStore, Var};
use crate::beamformer::ArrayGeometry;
use crate::error::Result;
use crate::frontend::{init_weights, AttentionConfig, BeamformerConfig, Frontend, FrontendInput, Variant};
use crate::tensor::Tensor;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Tiny problem sizes: 2 channels, 2 stacks of 3 frames, 8 bins.
pub const TINY_STACKS: usize = 2;
pub const TINY_BINS: usize = 8;

#[derive(Debug, Clone)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay out of the difference
/// stencil.
fn off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * r)` for a fixed random `r`, so every output entry matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.input(random(g.shape(y), &mut rng))?;
    let p = g.mul(y, r)?;
    g.sum_all(p)
}

type Build = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;

fn case(name: &str, inputs: Vec<(&str, Tensor)>, build: Build) -> Result<NamedReport> {
    let params: ParamStore = inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    let report = grad_check(build, &params, GRAD_STEP, GRAD_TOLERANCE)?;
    Ok(NamedReport {
        name: name.to_string(),
        report,
    })
}

/// Registers the named parameters and returns their handles in order.
fn vars<const N: usize>(g: &mut Graph, p: &ParamStore, names: [&str; N]) -> Result<[Var; N]> {
    let v: Vec<Var> = names.iter().map(|n| g.param_from(p, n)).collect::<Result<_>>()?;
    Ok(v.try_into().expect("one handle per name"))
}

/// Gradient checks of every differentiable primitive of the graph.
pub fn primitive_suite(seed: u64) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    out.push(case(
        "matmul",
        vec![("a", random(&[3, 4], r)), ("b", random(&[4, 2], r))],
        Box::new(|g, p| {
            let [a, b] = vars(g, p, ["a", "b"])?;
            let y = g.matmul(a, b)?;
            probe(g, y, 1)
        }),
    )?);
    out.push(case(
        "matmul_batched",
        vec![("a", random(&[2, 3, 4], r)), ("b", random(&[2, 4, 2], r))],
        Box::new(|g, p| {
            let [a, b] = vars(g, p, ["a", "b"])?;
            let y = g.matmul(a, b)?;
            probe(g, y, 2)
        }),
    )?);
    out.push(case(
        "matmul_shared_rhs",
        vec![("a", random(&[2, 3, 4], r)), ("b", random(&[4, 5], r))],
        Box::new(|g, p| {
            let [a, b] = vars(g, p, ["a", "b"])?;
            let y = g.matmul(a, b)?;
            probe(g, y, 3)
        }),
    )?);
    out.push(case(
        "permute_reshape_transpose",
        vec![("a", random(&[2, 3, 4], r))],
        Box::new(|g, p| {
            let [a] = vars(g, p, ["a"])?;
            let y = g.permute(a, &[2, 0, 1])?;
            let y = g.reshape(y, &[8, 3])?;
            let y = g.transpose(y, 0, 1)?;
            probe(g, y, 4)
        }),
    )?);
    out.push(case(
        "add_sub_mul",
        vec![("a", random(&[3, 3], r)), ("b", random(&[3, 3], r))],
        Box::new(|g, p| {
            let [a, b] = vars(g, p, ["a", "b"])?;
            let s = g.add(a, b)?;
            let d = g.sub(a, b)?;
            let y = g.mul(s, d)?;
            probe(g, y, 5)
        }),
    )?);
    out.push(case(
        "add_n_scale",
        vec![("a", random(&[4], r)), ("b", random(&[4], r)), ("c", random(&[4], r))],
        Box::new(|g, p| {
            let [a, b, c] = vars(g, p, ["a", "b", "c"])?;
            let xs = [a, b, c, a];
            let y = g.add_n(&xs)?;
            let y = g.scale(y, -0.7)?;
            probe(g, y, 6)
        }),
    )?);
    out.push(case(
        "linear",
        vec![("x", random(&[2, 3, 4], r)), ("w", random(&[4, 5], r)), ("b", random(&[5], r))],
        Box::new(|g, p| {
            let [x, w, b] = vars(g, p, ["x", "w", "b"])?;
            let y = g.linear(x, w, Some(b))?;
            probe(g, y, 7)
        }),
    )?);
    out.push(case(
        "relu",
        vec![("x", off_zero(&[3, 5], r))],
        Box::new(|g, p| {
            let [x] = vars(g, p, ["x"])?;
            let y = g.relu(x)?;
            probe(g, y, 8)
        }),
    )?);
    for axis in 0..3 {
        out.push(case(
            &format!("softmax_axis{axis}"),
            vec![("x", random(&[2, 3, 4], r))],
            Box::new(move |g, p| {
                let [x] = vars(g, p, ["x"])?;
                let y = g.softmax(x, axis)?;
                probe(g, y, 9)
            }),
        )?);
    }
    out.push(case(
        "layer_norm",
        vec![("x", random(&[3, 6], r)), ("gain", random(&[6], r)), ("bias", random(&[6], r))],
        Box::new(|g, p| {
            let [x, gain, bias] = vars(g, p, ["x", "gain", "bias"])?;
            let y = g.layer_norm(x, gain, bias, 1)?;
            probe(g, y, 10)
        }),
    )?);
    for (label, stride, pad) in [
        ("conv2d_same", (1, 1), Padding::Same),
        ("conv2d_strided", (1, 2), Padding::Same),
        ("conv2d_valid", (2, 1), Padding::Valid),
    ] {
        out.push(case(
            label,
            vec![("x", random(&[2, 2, 4, 5], r)), ("k", random(&[3, 2, 3, 3], r)), ("b", random(&[3], r))],
            Box::new(move |g, p| {
                let [x, k, b] = vars(g, p, ["x", "k", "b"])?;
                let y = g.conv2d(x, k, Some(b), stride, pad)?;
                probe(g, y, 11)
            }),
        )?);
    }
    out.push(case(
        "concat_slice_split",
        vec![("a", random(&[2, 3], r)), ("b", random(&[2, 2], r))],
        Box::new(|g, p| {
            let [a, b] = vars(g, p, ["a", "b"])?;
            let c = g.concat(&[a, b], 1)?;
            let s = g.slice(c, 1, 1, 3)?;
            let parts = g.split(c, 1, &[2, 3])?;
            let m = g.mul(s, parts[1])?;
            let y = g.concat(&[m, parts[0]], 1)?;
            probe(g, y, 12)
        }),
    )?);
    out.push(case(
        "sum_mean",
        vec![("x", random(&[2, 3, 4], r))],
        Box::new(|g, p| {
            let [x] = vars(g, p, ["x"])?;
            let s = g.sum(x, 1)?;
            let m = g.mean(x, 2)?;
            let a = probe(g, s, 13)?;
            let b = probe(g, m, 14)?;
            g.add(a, b)
        }),
    )?);
    out.push(case(
        "mse",
        vec![("a", random(&[3, 4], r)), ("b", random(&[3, 4], r))],
        Box::new(|g, p| {
            let [a, b] = vars(g, p, ["a", "b"])?;
            g.mse(a, b)
        }),
    )?);
    out.push(case(
        "dropout_mask",
        vec![("x", random(&[4, 4], r))],
        Box::new(|g, p| {
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let [x] = vars(g, p, ["x"])?;
            let y = g.dropout(x, 0.3, Some(&mut rng))?;
            probe(g, y, 16)
        }),
    )?);
    out.push(case(
        "complex_filter_sum",
        vec![("h", random(&[3, 4, 2, 2], r)), ("f", random(&[2, 4, 2, 2], r))],
        Box::new(|g, p| {
            let [h, f] = vars(g, p, ["h", "f"])?;
            let y = g.complex_filter_sum(h, f)?;
            probe(g, y, 17)
        }),
    )?);
    Ok(out)
}

/// The small attention configuration used by the variant suite.
pub fn tiny_attention() -> AttentionConfig {
    AttentionConfig {
        model_dim: 8,
        heads: 2,
        key_dim: 4,
        ffn_dim: 6,
        embed_channels: 2,
        ..AttentionConfig::desk()
    }
}

pub fn tiny_frontend(variant: Variant) -> Result<Frontend> {
    let bin_freqs = (0..TINY_BINS).map(|k| k as f64 * 1000.0).collect();
    Frontend::new(variant, tiny_attention(), BeamformerConfig::default(), bin_freqs, 3)
}

pub fn tiny_input(seed: u64) -> Result<FrontendInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mics = (0..2).map(|_| random(&[TINY_STACKS, 3, TINY_BINS, 2], &mut rng)).collect();
    FrontendInput::from_tensors(mics)
}

/// End-to-end check of front-end plus surrogate head for one variant in
/// evaluation mode, covering every parameter.
pub fn variant_check(variant: Variant, seed: u64) -> Result<NamedReport> {
    let frontend = tiny_frontend(variant)?;
    let head = SurrogateHead::for_frontend(&frontend);
    let geometry = ArrayGeometry::new(vec![[-0.0425, 0.0, 0.0], [0.0425, 0.0, 0.0]], 343.0)?;
    let mut params = init_weights(&frontend, seed, Some(&geometry))?;
    head.init_into(&mut params, seed);
    // Random biases and norm parameters so no gradient is trivially zero.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in params.iter_mut() {
        if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with("gain") {
            *t = random(t.shape(), &mut rng).map(|v| 0.3 * v + if name.ends_with("gain") { 1.0 } else { 0.0 });
        }
    }
    let input = tiny_input(seed)?;
    let target = random(&[TINY_STACKS, 3 * TINY_BINS * 2], &mut rng);
    let build = move |g: &mut Graph, p: &ParamStore| -> Result<Var> {
        let out = frontend.forward(g, p, &input, None)?;
        let y = head.forward(g, p, out.output)?;
        surrogate_loss(g, y, &target)
    };
    Ok(NamedReport {
        name: variant.name().to_string(),
        report: grad_check(build, &params, GRAD_STEP, GRAD_TOLERANCE)?,
    })
}

/// Every primitive, then every variant.
pub fn full_suite(seed: u64) -> Result<Vec<NamedReport>> {
    let mut out = primitive_suite(seed)?;
    for v in Variant::ALL {
        out.push(variant_check(v, seed)?);
    }
    Ok(out)
}
