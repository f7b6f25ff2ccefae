//! Parameter layout, initialization and the forward pass of every variant.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{AttentionConfig, AttentionKind, BeamformerConfig, BeamformerInit, ModelSpec, Variant};
use super::input::{FeatureConfig, FrontendInput};
use super::layers::{channel_attention_merge, embed_channel, embedded_bins, ffn_block, MergeOutput};
use super::names;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::beamformer::{self, ArrayGeometry, BeamformerWeights, LookingDirection};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Initializer of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    GlorotUniform { fan_in: usize, fan_out: usize },
    GlorotNormal { fan_in: usize, fan_out: usize },
}

impl Init {
    fn linear_uniform(fan_in: usize, fan_out: usize) -> Self {
        Init::GlorotUniform { fan_in, fan_out }
    }

    /// Glorot fans of a `[Cout, Cin, kh, kw]` kernel.
    fn conv_fans(shape: &[usize]) -> (usize, usize) {
        let field = shape[2] * shape[3];
        (shape[1] * field, shape[0] * field)
    }

    pub fn sample(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::GlorotUniform { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
            }
            Init::GlorotNormal { fan_in, fan_out } => {
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| normal.sample(rng))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of [`Frontend::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[S, output_width]`
    pub output: Var,
    /// Per-microphone embeddings `[S, F, D]` (attention variants).
    pub embedded: Vec<Var>,
    /// Self/cross attention terms and their sum (attention variants).
    pub merge: Option<MergeOutput>,
}

/// A front-end variant with its hyperparameters and input layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Frontend {
    pub variant: Variant,
    pub spec: ModelSpec,
    pub attention: AttentionConfig,
    pub beamformer: BeamformerConfig,
    /// Centre frequencies of the `B` input bins.
    pub bin_freqs: Vec<f64>,
    pub frames_per_stack: usize,
}

impl Frontend {
    pub fn new(
        variant: Variant,
        attention: AttentionConfig,
        beamformer: BeamformerConfig,
        bin_freqs: Vec<f64>,
        frames_per_stack: usize,
    ) -> Result<Self> {
        let spec = variant.spec();
        if spec.beamformer {
            beamformer.validate()?;
            if attention.channels < 2 {
                return Err(Error::config("attention.channels", "the beamformer needs at least 2 channels"));
            }
        } else {
            attention.validate(variant)?;
        }
        if bin_freqs.is_empty() || frames_per_stack == 0 {
            return Err(Error::invalid("frontend", "empty input layout"));
        }
        if spec.input_embedding {
            let min = attention.embed_freq_stride.pow(attention.embed_layers as u32);
            if bin_freqs.len() < min {
                return Err(Error::config(
                    "features",
                    format!("{} bins is below the embedding minimum {min}", bin_freqs.len()),
                ));
            }
        }
        Ok(Self {
            variant,
            spec,
            attention,
            beamformer,
            bin_freqs,
            frames_per_stack,
        })
    }

    pub fn from_features(
        variant: Variant,
        attention: AttentionConfig,
        beamformer: BeamformerConfig,
        features: &FeatureConfig,
    ) -> Result<Self> {
        Self::new(variant, attention, beamformer, features.bin_freqs()?, features.frames_per_stack())
    }

    pub fn bins(&self) -> usize {
        self.bin_freqs.len()
    }

    /// Width of each output row: `F * B * 2` for the beamformer (one
    /// rectangular spectrum per frame), `model_dim` otherwise.
    pub fn output_width(&self) -> usize {
        if self.spec.beamformer {
            self.frames_per_stack * self.bins() * 2
        } else {
            self.attention.model_dim
        }
    }

    /// Every trainable tensor in initialization order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let cfg = &self.attention;
        let b = self.bins();
        if self.spec.beamformer {
            let bf = &self.beamformer;
            let [kt, kf] = bf.combiner_kernel;
            let n = cfg.channels;
            let comb = [1, bf.directions, kt, kf];
            let (fi, fo) = Init::conv_fans(&comb);
            return vec![
                ParamSpec::new(beamformer::names::FILTERS, &[bf.directions, b, n, 2], Init::linear_uniform(2 * n, 2)),
                ParamSpec::new(beamformer::names::COMBINER, &comb, Init::linear_uniform(fi, fo)),
                ParamSpec::new(beamformer::names::COMBINER_BIAS, &[1], Init::Zeros),
            ];
        }
        let (d, k, e) = (cfg.model_dim, cfg.kernel, cfg.embed_channels);
        let mut specs = Vec::new();
        let embed_width = if self.spec.input_embedding {
            for layer in 0..cfg.embed_layers {
                let cin = if layer == 0 { 2 } else { e };
                let shape = [e, cin, k, k];
                let (fi, fo) = Init::conv_fans(&shape);
                let (wn, bn) = names::embed_conv(layer);
                specs.push(ParamSpec::new(wn, &shape, Init::linear_uniform(fi, fo)));
                specs.push(ParamSpec::new(bn, &[e], Init::Zeros));
            }
            e * embedded_bins(b, cfg.embed_freq_stride, cfg.embed_layers)
        } else {
            2 * b
        };
        specs.push(ParamSpec::new(names::PROJ_W, &[embed_width, d], Init::linear_uniform(embed_width, d)));
        specs.push(ParamSpec::new(names::PROJ_B, &[d], Init::Zeros));
        match self.spec.attention {
            AttentionKind::MultiHead => {
                for name in [names::WQ, names::WK, names::WV, names::WO] {
                    specs.push(ParamSpec::new(name, &[d, d], Init::GlorotNormal { fan_in: d, fan_out: d }));
                }
            }
            kind => {
                let h = cfg.heads;
                for name in [names::WQ, names::WK, names::WV] {
                    let shape = [h, 1, k, k];
                    let (fan_in, fan_out) = Init::conv_fans(&shape);
                    specs.push(ParamSpec::new(name, &shape, Init::GlorotNormal { fan_in, fan_out }));
                }
                let cat = if kind == AttentionKind::Conv2d { 2 * h } else { h };
                let shape = [1, cat, k, k];
                let (fan_in, fan_out) = Init::conv_fans(&shape);
                specs.push(ParamSpec::new(names::WO, &shape, Init::GlorotNormal { fan_in, fan_out }));
            }
        }
        specs.push(ParamSpec::new(names::NORM_GAIN, &[d], Init::Ones));
        specs.push(ParamSpec::new(names::NORM_BIAS, &[d], Init::Zeros));
        if self.spec.ffn {
            let f = cfg.ffn_dim;
            specs.push(ParamSpec::new(names::FFN_W1, &[d, f], Init::linear_uniform(d, f)));
            specs.push(ParamSpec::new(names::FFN_B1, &[f], Init::Zeros));
            specs.push(ParamSpec::new(names::FFN_W2, &[f, d], Init::linear_uniform(f, d)));
            specs.push(ParamSpec::new(names::FFN_B2, &[d], Init::Zeros));
        }
        let flat = self.frames_per_stack * d;
        specs.push(ParamSpec::new(names::OUT_W, &[flat, d], Init::linear_uniform(flat, d)));
        specs.push(ParamSpec::new(names::OUT_B, &[d], Init::Zeros));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::len).sum()
    }

    /// Runs the front-end on `input`. Passing an `rng` enables dropout
    /// (training mode); `None` is evaluation mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        input: &FrontendInput,
        mut rng: Option<&mut (dyn RngCore + '_)>,
    ) -> Result<ForwardOutput> {
        if input.num_mics() != self.attention.channels {
            return Err(Error::invalid(
                "frontend",
                format!("{} input channels, configured for {}", input.num_mics(), self.attention.channels),
            ));
        }
        if input.bins() != self.bins() || input.frames_per_stack() != self.frames_per_stack {
            return Err(Error::ShapeMismatch {
                op: "frontend",
                left: vec![self.frames_per_stack, self.bins()],
                right: vec![input.frames_per_stack(), input.bins()],
            });
        }
        let s = input.stacks();
        if self.spec.beamformer {
            let x = g.input(input.beamformer_input()?)?;
            let y = beamformer::neural_beamformer_forward(g, params, x)?;
            let output = g.reshape(y, &[s, self.output_width()])?;
            return Ok(ForwardOutput {
                output,
                embedded: Vec::new(),
                merge: None,
            });
        }
        let cfg = &self.attention;
        let mut embedded = Vec::with_capacity(input.num_mics());
        for c in 0..input.num_mics() {
            let e = if self.spec.input_embedding {
                let x = g.input(input.embedding_input(c)?)?;
                embed_channel(g, params, Some(x), None, cfg)?
            } else {
                let x = g.input(input.flat_input(c)?)?;
                embed_channel(g, params, None, Some(x), cfg)?
            };
            embedded.push(e);
        }
        let merge = channel_attention_merge(g, params, &embedded, cfg, self.spec.attention, self.spec.cross_attention)?;
        let merged = g.dropout(merge.merged, cfg.dropout, rng.as_deref_mut())?;
        let output = ffn_block(g, params, merged, cfg, self.spec.ffn, rng)?;
        Ok(ForwardOutput {
            output,
            embedded,
            merge: Some(merge),
        })
    }
}

/// Seeded initialization of every parameter of `frontend`.
///
/// With [`BeamformerInit::Superdirective`] the beamformer filters are the
/// superdirective solution on `geometry` (the picked microphones, in input
/// channel order) and the combiner passes the look direction through.
pub fn init_weights(frontend: &Frontend, seed: u64, geometry: Option<&ArrayGeometry>) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store: ParamStore = frontend
        .param_specs()
        .into_iter()
        .map(|p| {
            let t = p.init.sample(&p.shape, &mut rng);
            (p.name, t)
        })
        .collect();
    let bf = &frontend.beamformer;
    if frontend.spec.beamformer && bf.init == BeamformerInit::Superdirective {
        let geometry = geometry.ok_or_else(|| Error::config("geometry", "superdirective init needs a geometry"))?;
        if geometry.num_mics() != frontend.attention.channels {
            return Err(Error::config(
                "geometry",
                format!("{} mics, model expects {}", geometry.num_mics(), frontend.attention.channels),
            ));
        }
        let dirs = LookingDirection::equispaced(bf.directions);
        let kernel = (bf.combiner_kernel[0], bf.combiner_kernel[1]);
        BeamformerWeights::superdirective(geometry, &dirs, &frontend.bin_freqs, bf.loading, kernel, bf.look_index)?
            .insert_into(&mut store);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn tiny(variant: Variant) -> Frontend {
        let cfg = AttentionConfig {
            model_dim: 8,
            heads: 2,
            key_dim: 4,
            ffn_dim: 6,
            embed_channels: 2,
            ..AttentionConfig::desk()
        };
        Frontend::new(variant, cfg, BeamformerConfig::default(), (0..8).map(|k| k as f64 * 500.0).collect(), 3).unwrap()
    }

    fn input(stacks: usize, bins: usize, seed: u64) -> FrontendInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mics = (0..2)
            .map(|_| Tensor::from_fn(&[stacks, 3, bins, 2], |_| rng.random_range(-1.0..1.0)))
            .collect();
        FrontendInput::from_tensors(mics).unwrap()
    }

    #[test]
    fn output_shapes() {
        let x = input(2, 8, 1);
        for v in Variant::ALL {
            let f = tiny(v);
            let geo = ArrayGeometry::new(vec![[0.0; 3], [0.085, 0.0, 0.0]], 343.0).unwrap();
            let p = init_weights(&f, 3, Some(&geo)).unwrap();
            let mut g = Graph::new(Precision::F64);
            let out = f.forward(&mut g, &p, &x, None).unwrap();
            assert_eq!(g.shape(out.output), &[2, f.output_width()], "{v}");
            assert_eq!(p.param_count(), f.param_count(), "{v}");
        }
    }

    #[test]
    fn init_is_seeded() {
        let f = tiny(Variant::Conv2d);
        let a = init_weights(&f, 9, None).unwrap();
        let b = init_weights(&f, 9, None).unwrap();
        let c = init_weights(&f, 10, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn glorot_uniform_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Init::GlorotUniform { fan_in: 64, fan_out: 64 }.sample(&[64, 64], &mut rng);
        let bound = (6.0f64 / 128.0).sqrt();
        assert!((bound - 0.2165).abs() < 1e-4);
        assert!(t.data().iter().all(|x| x.abs() <= bound));
        assert!(t.data().iter().any(|x| x.abs() > 0.9 * bound));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let f = tiny(Variant::Mha);
        let p = init_weights(&f, 0, None).unwrap();
        let one = FrontendInput::from_tensors(vec![Tensor::zeros(&[1, 3, 8, 2])]).unwrap();
        let mut g = Graph::new(Precision::F64);
        assert!(f.forward(&mut g, &p, &one, None).is_err());
    }

    #[test]
    fn superdirective_needs_geometry() {
        let f = tiny(Variant::NeuralBeamformer);
        assert!(matches!(init_weights(&f, 0, None), Err(Error::Config { .. })));
    }
}
