use mcfront::autodiff::{Graph, ParamStore, Var};
use mcfront::frontend::attention::{conv_attention_2d, multi_head_attention, scaled_dot_attention};
use mcfront::frontend::{init_weights, names, AttentionConfig, AttentionKind, Init};
use mcfront::train::gradcheck::{primitive_suite, tiny_frontend, tiny_input};
use mcfront::train::{Adam, AdamConfig};
use mcfront::{Precision, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.random_range(-1.0..1.0))
}

/// Every row along the last axis sums to one and is non-negative.
fn assert_row_stochastic(t: &Tensor) {
    let n = *t.shape().last().unwrap();
    for row in t.data().chunks(n) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
        assert!(row.iter().all(|&w| w >= 0.0));
    }
}

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 24,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn plain_attention_rows_are_stochastic(seed in any::<u64>(), tq in 1usize..6, tk in 1usize..6, d in 1usize..5, scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(Precision::F64);
        let q = g.input(random(&[2, tq, d], &mut rng, scale)).unwrap();
        let k = g.input(random(&[2, tk, d], &mut rng, scale)).unwrap();
        let v = g.input(random(&[2, tk, 3], &mut rng, 1.0)).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        prop_assert_eq!(g.shape(out.weights), &[2, tq, tk]);
        assert_row_stochastic(g.value(out.weights));
    }

    #[test]
    fn conv_attention_rows_are_stochastic_on_both_axes(seed in any::<u64>(), t in 1usize..5, f in 1usize..7, h in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        for n in [names::WQ, names::WK, names::WV] {
            p.insert(n, random(&[h, 1, 3, 3], &mut rng, 1.0));
        }
        p.insert(names::WO, random(&[1, 2 * h, 3, 3], &mut rng, 1.0));
        let mut g = Graph::new(Precision::F64);
        let x = g.input(random(&[2, 1, t, f], &mut rng, 3.0)).unwrap();
        let y = g.input(random(&[2, 1, t, f], &mut rng, 3.0)).unwrap();
        let out = conv_attention_2d(&mut g, &p, x, y, y, AttentionKind::Conv2d).unwrap();
        prop_assert_eq!(out.weights.len(), 2);
        prop_assert_eq!(g.shape(out.weights[0]), &[2, h, t, t]);
        prop_assert_eq!(g.shape(out.weights[1]), &[2, h, f, f]);
        for w in &out.weights {
            assert_row_stochastic(g.value(*w));
        }
    }

    #[test]
    fn multi_head_rows_are_stochastic(seed in any::<u64>(), heads in 1usize..4, t in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4 * heads;
        let cfg = AttentionConfig { model_dim: d, heads, key_dim: 4, ..AttentionConfig::desk() };
        let mut p = ParamStore::new();
        for n in [names::WQ, names::WK, names::WV, names::WO] {
            p.insert(n, random(&[d, d], &mut rng, 1.0));
        }
        let mut g = Graph::new(Precision::F64);
        let x = g.input(random(&[3, t, d], &mut rng, 1.0)).unwrap();
        let out = multi_head_attention(&mut g, &p, x, x, x, &cfg).unwrap();
        for w in &out.weights {
            prop_assert_eq!(g.shape(*w)[g.shape(*w).len() - 1], t);
            assert_row_stochastic(g.value(*w));
        }
    }

    #[test]
    fn zero_query_averages_values(seed in any::<u64>(), tq in 1usize..5, tk in 1usize..7, d in 1usize..5, dv in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(Precision::F64);
        let q = g.input(Tensor::zeros(&[tq, d])).unwrap();
        let k = g.input(random(&[tk, d], &mut rng, 5.0)).unwrap();
        let vt = random(&[tk, dv], &mut rng, 1.0);
        let v = g.input(vt.clone()).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        let y = g.value(out.output).data();
        for r in 0..tq {
            for c in 0..dv {
                let mean = (0..tk).map(|j| vt.data()[j * dv + c]).sum::<f64>() / tk as f64;
                prop_assert!((y[r * dv + c] - mean).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn single_key_is_identity(seed in any::<u64>(), tq in 1usize..6, d in 1usize..5, dv in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(Precision::F64);
        let q = g.input(random(&[tq, d], &mut rng, 10.0)).unwrap();
        let k = g.input(random(&[1, d], &mut rng, 10.0)).unwrap();
        let vt = random(&[1, dv], &mut rng, 1.0);
        let v = g.input(vt.clone()).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        for row in g.value(out.output).data().chunks(dv) {
            for (a, b) in row.iter().zip(vt.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn softmax_and_layer_norm_statistics(seed in any::<u64>(), rows in 1usize..5, cols in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(Precision::F64);
        let x = g.input(random(&[rows, cols], &mut rng, 4.0)).unwrap();
        let s = g.softmax(x, 1).unwrap();
        assert_row_stochastic(g.value(s));
        let gain = g.input(Tensor::ones(&[cols])).unwrap();
        let bias = g.input(Tensor::zeros(&[cols])).unwrap();
        let n = g.layer_norm(x, gain, bias, 1).unwrap();
        for row in g.value(n).data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-9);
            // Variance is slightly below one because of the epsilon.
            prop_assert!(var <= 1.0 && var > 0.9);
        }
    }

    #[test]
    fn primitive_gradients_pass_for_every_seed(seed in any::<u64>()) {
        for r in primitive_suite(seed).unwrap() {
            prop_assert!(r.report.passed(), "{}: {:.3e}", r.name, r.report.max_rel_error());
        }
    }

    #[test]
    fn glorot_uniform_stays_within_bound(seed in any::<u64>(), fan_in in 1usize..100, fan_out in 1usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Init::GlorotUniform { fan_in, fan_out }.sample(&[fan_in, fan_out], &mut rng);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        prop_assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    /// The step is `lr * |g| / (|g| + eps)` after bias correction, so it is
    /// close to `lr` once the gradient is well above `eps`.
    #[test]
    fn first_adam_step_moves_by_lr(log_mag in -4.0f64..6.0, negative in any::<bool>()) {
        let grad = if negative { -10f64.powf(log_mag) } else { 10f64.powf(log_mag) };
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(0.5));
        let grads = [("w".to_string(), Tensor::scalar(grad))].into_iter().collect();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut params, &grads);
        let moved = params.get("w").unwrap().data()[0] - 0.5;
        prop_assert!((moved.abs() - 1e-3).abs() <= 1e-3 * 1e-3, "moved {moved}");
        prop_assert_eq!(moved < 0.0, grad > 0.0);
    }

    #[test]
    fn channel_swap_invariance_over_seeds(seed in 0u64..1000) {
        for v in [mcfront::frontend::Variant::Conv2d, mcfront::frontend::Variant::Mha] {
            let f = tiny_frontend(v).unwrap();
            let p = init_weights(&f, seed, None).unwrap();
            let x = tiny_input(seed).unwrap();
            let mut g = Graph::new(Precision::F32);
            let a = f.forward(&mut g, &p, &x, None).unwrap();
            let b = f.forward(&mut g, &p, &x.swapped(), None).unwrap();
            let diff = g.value(a.output).max_abs_diff(g.value(b.output));
            prop_assert!(diff <= 1e-5, "{v}: {diff}");
        }
    }
}

#[test]
fn zero_query_through_conv_projection() {
    // With zero Q/K kernels every conv-attention row averages the values.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ParamStore::new();
    p.insert(names::WQ, Tensor::zeros(&[1, 1, 3, 3]));
    p.insert(names::WK, random(&[1, 1, 3, 3], &mut rng, 1.0));
    p.insert(names::WV, random(&[1, 1, 3, 3], &mut rng, 1.0));
    p.insert(names::WO, random(&[1, 2, 3, 3], &mut rng, 1.0));
    let mut g = Graph::new(Precision::F64);
    let x: Var = g.input(random(&[1, 1, 3, 5], &mut rng, 1.0)).unwrap();
    let out = conv_attention_2d(&mut g, &p, x, x, x, AttentionKind::Conv2d).unwrap();
    for w in &out.weights {
        let n = *g.shape(*w).last().unwrap();
        assert!(g.value(*w).data().iter().all(|&v| (v - 1.0 / n as f64).abs() < 1e-12));
    }
}
