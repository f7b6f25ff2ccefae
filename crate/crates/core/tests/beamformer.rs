mod common;

use mcfront::beamformer::{
    apply_beamformer, delay_and_sum_weights, diffuse_coherence, response, steering_vector, superdirective_weights,
    ArrayGeometry, GeometryConfig, LookingDirection,
};
use mcfront::features::{stft, ComplexSpectrogram, StftConfig, WindowKind};
use mcfront::synth::{item_rng, render_scene, SceneSpec, SourceKind};
use mcfront::Tensor;
use nalgebra::DMatrix;
use num_complex::Complex64;

/// Gauss-Jordan solve with partial pivoting, written out on complex scalars.
fn dense_solve(a: &DMatrix<f64>, b: &[Complex64]) -> Vec<Complex64> {
    let n = b.len();
    let mut m: Vec<Vec<Complex64>> = (0..n)
        .map(|i| {
            let mut row: Vec<Complex64> = (0..n).map(|j| Complex64::new(a[(i, j)], 0.0)).collect();
            row.push(b[i]);
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].norm().total_cmp(&m[y][c].norm())).unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        for v in m[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                let pivot_row = m[c].clone();
                for (v, pv) in m[r].iter_mut().zip(pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    m.into_iter().map(|row| row[n]).collect()
}

fn seven_mic() -> ArrayGeometry {
    GeometryConfig::default().full().unwrap()
}

#[test]
fn distortionless_for_every_direction_and_bin() {
    let g = seven_mic();
    let freqs: Vec<f64> = (0..257).map(|k| k as f64 * 31.25).collect();
    for dir in LookingDirection::equispaced(7) {
        for &f in &freqs {
            let d = steering_vector(&g, &dir, f);
            let w = superdirective_weights(&diffuse_coherence(&g, f), &d, 1e-2).unwrap();
            assert!((response(&w, &d) - 1.0).norm() < 1e-6, "f={f}");
        }
    }
}

#[test]
fn near_singular_low_frequency_matches_dense_solve() {
    let g = seven_mic();
    let dir = LookingDirection::horizontal(0.7);
    for f in [0.0, 15.625, 31.25, 62.5] {
        let gamma = diffuse_coherence(&g, f);
        let d = steering_vector(&g, &dir, f);
        let w = superdirective_weights(&gamma, &d, 1e-2).unwrap();
        let loaded = &gamma + DMatrix::identity(7, 7) * 1e-2;
        let x = dense_solve(&loaded, &d);
        let denom: Complex64 = d.iter().zip(&x).map(|(di, xi)| di.conj() * xi).sum();
        for (wi, xi) in w.iter().zip(&x) {
            assert!((wi - xi / denom).norm() < 1e-8, "f={f}");
        }
    }
}

#[test]
fn identity_coherence_closed_form() {
    let g = seven_mic();
    for dir in LookingDirection::equispaced(7) {
        let d = steering_vector(&g, &dir, 1700.0);
        let w = superdirective_weights(&DMatrix::identity(7, 7), &d, 0.0).unwrap();
        for (wi, di) in w.iter().zip(&d) {
            assert!((wi - di / 7.0).norm() < 1e-10);
        }
        assert_eq!(delay_and_sum_weights(&d).len(), 7);
    }
}

#[test]
fn coherence_is_psd_after_loading() {
    let g = seven_mic();
    for f in [0.0, 100.0, 1000.0, 4000.0, 8000.0] {
        let m = diffuse_coherence(&g, f) + DMatrix::identity(7, 7) * 1e-2;
        let eig = m.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10), "f={f}");
        assert!((diffuse_coherence(&g, f).transpose() - diffuse_coherence(&g, f)).norm() < 1e-15);
    }
}

#[test]
fn half_wavelength_spacing_has_zero_coherence() {
    let c = 343.0;
    let f = 2000.0;
    let g = ArrayGeometry::new(vec![[0.0; 3], [c / (2.0 * f), 0.0, 0.0]], c).unwrap();
    assert!(diffuse_coherence(&g, f)[(0, 1)].abs() < 1e-15);
}

fn spectrogram(data: Vec<f64>, frames: usize, bins: usize) -> ComplexSpectrogram {
    ComplexSpectrogram {
        frames: Tensor::new(&[frames, bins, 2], data).unwrap(),
        bin_freqs: vec![0.0; bins],
        frame_shift: 0.01,
    }
}

#[test]
fn two_channel_four_bin_case_matches_scalar_oracle() {
    let f0: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
    let f1: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
    let h: Vec<Vec<Complex64>> = (0..4)
        .map(|b| vec![Complex64::new(0.5 + b as f64, -0.25), Complex64::new(-1.0, 0.1 * b as f64)])
        .collect();
    let y = apply_beamformer(&h, &[spectrogram(f0.clone(), 1, 4), spectrogram(f1.clone(), 1, 4)]).unwrap();
    for b in 0..4 {
        let x0 = Complex64::new(f0[2 * b], f0[2 * b + 1]);
        let x1 = Complex64::new(f1[2 * b], f1[2 * b + 1]);
        let want = h[b][0] * x0 + h[b][1] * x1;
        assert!((y.get(0, b) - want).norm() < 1e-14);
    }
}

#[test]
fn apply_beamformer_is_linear() {
    let a = spectrogram((0..16).map(|i| i as f64).collect(), 2, 4);
    let b = spectrogram((0..16).map(|i| (i as f64).sqrt()).collect(), 2, 4);
    let h1: Vec<Vec<Complex64>> = (0..4).map(|k| vec![Complex64::new(1.0, k as f64); 2]).collect();
    let h2: Vec<Vec<Complex64>> = (0..4).map(|k| vec![Complex64::new(-0.5, 0.3), Complex64::new(k as f64, 1.0)]).collect();
    let hs: Vec<Vec<Complex64>> = h1.iter().zip(&h2).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
    let y1 = apply_beamformer(&h1, &[a.clone(), b.clone()]).unwrap();
    let y2 = apply_beamformer(&h2, &[a.clone(), b.clone()]).unwrap();
    let ys = apply_beamformer(&hs, &[a, b]).unwrap();
    for (s, (p, q)) in ys.frames.data().iter().zip(y1.frames.data().iter().zip(y2.frames.data())) {
        assert!((s - (p + q)).abs() < 1e-12);
    }
}

#[test]
fn superdirective_init_passes_look_direction() {
    for look in [0, 3, 5] {
        let e = common::pass_through_error(look);
        assert!(e < 1e-4, "look {look}: relative error {e}");
    }
}

#[test]
fn stft_of_delayed_tone_is_phase_shift() {
    // Sanity check of the construction used above on one channel.
    let pair = GeometryConfig::default().picked().unwrap();
    let spec = SceneSpec {
        source: SourceKind::Tones { freqs: vec![1000.0] },
        interferer: None,
        diffuse_snr_db: None,
        duration: 16384.0 / 16000.0,
        ..SceneSpec::default()
    };
    let item = render_scene(&spec, &pair, &mut item_rng(1, 0)).unwrap();
    let cfg = StftConfig {
        window_ms: 32.0,
        shift_ms: 10.0,
        n_fft: Some(512),
        window: WindowKind::Rectangular,
    };
    let noisy = stft(&item.noisy, &cfg).unwrap();
    let clean = &stft(&item.clean, &cfg).unwrap()[0];
    let d = steering_vector(&pair, &LookingDirection::horizontal(0.0), 1000.0);
    for (c, s) in noisy.iter().enumerate() {
        for t in [0, 10, 40] {
            assert!((s.get(t, 32) - d[c] * clean.get(t, 32)).norm() < 1e-9);
        }
    }
}
