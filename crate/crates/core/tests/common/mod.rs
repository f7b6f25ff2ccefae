use std::f64::consts::PI;

use mcfront::autodiff::Graph;
use mcfront::beamformer::GeometryConfig;
use mcfront::features::{StftConfig, WindowKind};
use mcfront::frontend::{init_weights, AttentionConfig, BeamformerConfig, FeatureConfig, Frontend, FrontendInput, Variant};
use mcfront::synth::{item_rng, render_scene, SceneSpec, SourceKind};
use mcfront::Precision;

/// A source made of bin-centred tones, delayed circularly and analysed with a
/// rectangular window of exactly one FFT length: each channel's STFT is then
/// exactly the clean STFT times the steering phase.
pub fn pass_through_error(look: usize) -> f64 {
    let geometry_cfg = GeometryConfig::default();
    let pair = geometry_cfg.picked().unwrap();
    let features = FeatureConfig {
        stft: StftConfig {
            window_ms: 32.0,
            shift_ms: 10.0,
            n_fft: Some(512),
            window: WindowKind::Rectangular,
        },
        ..FeatureConfig::default()
    };
    let spec = SceneSpec {
        source: SourceKind::Tones {
            freqs: (1..=24).map(|k| 125.0 * k as f64).collect(),
        },
        source_azimuth: 2.0 * PI * look as f64 / 7.0,
        interferer: None,
        diffuse_snr_db: None,
        duration: 16384.0 / 16000.0,
        ..SceneSpec::default()
    };
    let item = render_scene(&spec, &pair, &mut item_rng(3, look as u64)).unwrap();
    let bf = BeamformerConfig {
        look_index: look,
        ..BeamformerConfig::default()
    };
    let frontend = Frontend::from_features(Variant::NeuralBeamformer, AttentionConfig::desk(), bf, &features).unwrap();
    let params = init_weights(&frontend, 0, Some(&pair)).unwrap();
    let input = FrontendInput::from_waveform(&item.noisy, &features).unwrap();
    let mut g = Graph::new(Precision::F64);
    let out = frontend.forward(&mut g, &params, &input, None).unwrap();
    let clean = features.extract(&item.clean).unwrap().remove(0).data;
    let y = g.value(out.output);
    let diff = y.data().iter().zip(clean.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    diff / clean.norm()
}
