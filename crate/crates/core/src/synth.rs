//! Synthetic far-field scenes: plane-wave sources, a point interferer and
//! diffuse noise on a microphone array, paired with the clean source.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::beamformer::{ArrayGeometry, LookingDirection};
use crate::error::{Error, Result};
use crate::features::Waveform;

/// Plane waves used for the diffuse noise field.
pub const DIFFUSE_WAVES: usize = 36;

/// RMS level of generated sources.
const SOURCE_RMS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceKind {
    /// Sum of sinusoids at fixed frequencies with random phase and amplitude.
    Tones { freqs: Vec<f64> },
    /// Band-limited Gaussian noise switched on and off.
    NoiseBursts { low_hz: f64, high_hz: f64 },
    /// Linear sweep with random start phase.
    Chirp { start_hz: f64, end_hz: f64 },
}

impl Default for SourceKind {
    fn default() -> Self {
        SourceKind::Tones {
            freqs: vec![250.0, 500.0, 875.0, 1250.0, 2000.0],
        }
    }
}

impl SourceKind {
    /// Generates `len` samples scaled to [`SOURCE_RMS`].
    pub fn generate(&self, len: usize, sample_rate: f64, rng: &mut impl Rng) -> Vec<f64> {
        let t = |n: usize| n as f64 / sample_rate;
        let mut x: Vec<f64> = match self {
            SourceKind::Tones { freqs } => {
                let parts: Vec<(f64, f64, f64)> = freqs
                    .iter()
                    .map(|&f| (f, rng.random_range(0.5..1.0), rng.random_range(0.0..2.0 * PI)))
                    .collect();
                (0..len)
                    .map(|n| parts.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t(n) + p).sin()).sum())
                    .collect()
            }
            SourceKind::NoiseBursts { low_hz, high_hz } => {
                let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
                let mut x = band_limit(&white, sample_rate, *low_hz, *high_hz);
                let mut on = rng.random_bool(0.5);
                let mut n = 0;
                while n < len {
                    let seg = (rng.random_range(0.05..0.2) * sample_rate) as usize;
                    let end = (n + seg.max(1)).min(len);
                    if !on {
                        x[n..end].iter_mut().for_each(|v| *v *= 0.05);
                    }
                    on = !on;
                    n = end;
                }
                x
            }
            SourceKind::Chirp { start_hz, end_hz } => {
                let dur = len as f64 / sample_rate;
                let k = (end_hz - start_hz) / dur;
                let p: f64 = rng.random_range(0.0..2.0 * PI);
                (0..len)
                    .map(|n| (2.0 * PI * (start_hz * t(n) + 0.5 * k * t(n) * t(n)) + p).sin())
                    .collect()
            }
        };
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
        if rms > 0.0 {
            x.iter_mut().for_each(|v| *v *= SOURCE_RMS / rms);
        }
        x
    }
}

/// Point interferer. A missing azimuth is drawn uniformly per item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfererSpec {
    pub source: SourceKind,
    #[serde(default)]
    pub azimuth: Option<f64>,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub source: SourceKind,
    /// Source azimuth in radians.
    pub source_azimuth: f64,
    pub interferer: Option<InterfererSpec>,
    /// Source-to-diffuse-noise ratio; `None` disables the diffuse field.
    pub diffuse_snr_db: Option<f64>,
    pub duration: f64,
    pub sample_rate: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// Fixed tone set from azimuth 0, a noise-burst interferer from a random
    /// azimuth at 0 dB, diffuse noise at 20 dB, one second at 16 kHz.
    fn default() -> Self {
        Self {
            source: SourceKind::default(),
            source_azimuth: 0.0,
            interferer: Some(InterfererSpec {
                source: SourceKind::NoiseBursts {
                    low_hz: 200.0,
                    high_hz: 4000.0,
                },
                azimuth: None,
                snr_db: 0.0,
            }),
            diffuse_snr_db: Some(20.0),
            duration: 1.0,
            sample_rate: 16000.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration >= 0.1) || !self.duration.is_finite() {
            return Err(Error::config("scene.duration", "must be at least 0.1 s"));
        }
        if !(self.sample_rate > 0.0) || !self.sample_rate.is_finite() {
            return Err(Error::config("scene.sample_rate", "must be positive"));
        }
        if !self.source_azimuth.is_finite() {
            return Err(Error::config("scene.source_azimuth", "must be finite"));
        }
        if let Some(i) = &self.interferer {
            if i.snr_db.is_nan() || i.snr_db == f64::NEG_INFINITY {
                return Err(Error::config("scene.interferer.snr_db", "must be a number"));
            }
            if i.azimuth.is_some_and(|a| !a.is_finite()) {
                return Err(Error::config("scene.interferer.azimuth", "must be finite"));
            }
        }
        if self.diffuse_snr_db.is_some_and(|s| s.is_nan() || s == f64::NEG_INFINITY) {
            return Err(Error::config("scene.diffuse_snr_db", "must be a number"));
        }
        let nyquist = self.sample_rate / 2.0;
        let check = |field: &str, k: &SourceKind| -> Result<()> {
            let ok = match k {
                SourceKind::Tones { freqs } => !freqs.is_empty() && freqs.iter().all(|f| (0.0..nyquist).contains(f)),
                SourceKind::NoiseBursts { low_hz, high_hz } => 0.0 <= *low_hz && low_hz < high_hz && *high_hz <= nyquist,
                SourceKind::Chirp { start_hz, end_hz } => {
                    (0.0..nyquist).contains(start_hz) && (0.0..nyquist).contains(end_hz)
                }
            };
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, "frequencies must lie in [0, Nyquist)"))
            }
        };
        check("scene.source", &self.source)?;
        if let Some(i) = &self.interferer {
            check("scene.interferer.source", &i.source)?;
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }
}

/// Zeroes every FFT bin outside `[low, high]` Hz.
fn band_limit(x: &[f64], sample_rate: f64, low: f64, high: f64) -> Vec<f64> {
    let n = x.len();
    let mut spec = forward_fft(x);
    for (k, z) in spec.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sample_rate / n as f64;
        if f < low || f > high {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    inverse_fft(spec)
}

fn forward_fft(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

fn inverse_fft(mut spec: Vec<Complex64>) -> Vec<f64> {
    let n = spec.len();
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    spec.iter().map(|z| z.re / n as f64).collect()
}

/// Multiplies a full spectrum by the phase ramp of a `delay`-sample circular
/// shift. The Nyquist bin of an even length takes the real part of its ramp
/// so the result stays real.
fn delay_spectrum(spec: &[Complex64], delay: f64, out: &mut [Complex64], gain: f64) {
    let n = spec.len();
    for k in 0..n {
        let kk = if 2 * k < n {
            k as f64
        } else if 2 * k == n {
            out[k] += spec[k] * gain * (PI * delay).cos();
            continue;
        } else {
            k as f64 - n as f64
        };
        out[k] += spec[k] * Complex64::from_polar(gain, -2.0 * PI * kk * delay / n as f64);
    }
}

/// Band-limited circular delay of `x` by `delay` samples (may be fractional
/// or negative).
pub fn fractional_delay(x: &[f64], delay: f64) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let spec = forward_fft(x);
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    delay_spectrum(&spec, delay, &mut out, 1.0);
    inverse_fft(out)
}

/// Each channel receives `source` delayed by its plane-wave delay, unit gain.
pub fn simulate_plane_wave(
    geometry: &ArrayGeometry,
    source: &[f64],
    sample_rate: f64,
    direction: &LookingDirection,
) -> Result<Waveform> {
    let mut mix = Mixer::new(geometry.num_mics(), source.len());
    mix.add(geometry, source, sample_rate, direction, 1.0);
    Waveform::new(mix.finish(), sample_rate)
}

/// Accumulates delayed sources per channel in the frequency domain.
struct Mixer {
    spectra: Vec<Vec<Complex64>>,
}

impl Mixer {
    fn new(channels: usize, len: usize) -> Self {
        Self {
            spectra: vec![vec![Complex64::new(0.0, 0.0); len]; channels],
        }
    }

    fn add(&mut self, geometry: &ArrayGeometry, source: &[f64], sample_rate: f64, direction: &LookingDirection, gain: f64) {
        let spec = forward_fft(source);
        for (out, tau) in self.spectra.iter_mut().zip(geometry.delays(direction)) {
            delay_spectrum(&spec, tau * sample_rate, out, gain);
        }
    }

    fn finish(self) -> Vec<Vec<f64>> {
        self.spectra.into_iter().map(inverse_fft).collect()
    }
}

fn power(channels: &[Vec<f64>]) -> f64 {
    let n: usize = channels.iter().map(Vec::len).sum();
    channels.iter().flatten().map(|v| v * v).sum::<f64>() / n.max(1) as f64
}

/// One rendered scene: the array signals and the undelayed source.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneItem {
    pub noisy: Waveform,
    pub clean: Waveform,
    /// Azimuth the interferer was placed at, if any.
    pub interferer_azimuth: Option<f64>,
}

fn enabled(snr: Option<f64>) -> Option<f64> {
    snr.filter(|s| s.is_finite())
}

/// Adds `component` to `mix` scaled so that `signal_power / power = 10^(snr/10)`.
fn add_at_snr(mix: &mut [Vec<f64>], component: Vec<Vec<f64>>, signal_power: f64, snr_db: f64) {
    let p = power(&component);
    if p <= 0.0 {
        return;
    }
    let gain = (signal_power / 10f64.powf(snr_db / 10.0) / p).sqrt();
    for (m, c) in mix.iter_mut().zip(component) {
        for (a, b) in m.iter_mut().zip(c) {
            *a += gain * b;
        }
    }
}

/// Renders the scene with an explicit RNG. SNRs are measured on the emitted
/// channels of `geometry`.
pub fn render_scene(spec: &SceneSpec, geometry: &ArrayGeometry, rng: &mut impl Rng) -> Result<SceneItem> {
    spec.validate()?;
    let len = spec.num_samples();
    let fs = spec.sample_rate;
    let source = spec.source.generate(len, fs, rng);
    let look = LookingDirection::horizontal(spec.source_azimuth);
    let mut m = Mixer::new(geometry.num_mics(), len);
    m.add(geometry, &source, fs, &look, 1.0);
    let mut mix = m.finish();
    let signal_power = power(&mix);

    let mut interferer_azimuth = None;
    if let Some(i) = &spec.interferer {
        let az = i.azimuth.unwrap_or_else(|| rng.random_range(0.0..2.0 * PI));
        let x = i.source.generate(len, fs, rng);
        if let Some(snr) = enabled(Some(i.snr_db)) {
            let mut m = Mixer::new(geometry.num_mics(), len);
            m.add(geometry, &x, fs, &LookingDirection::horizontal(az), 1.0);
            add_at_snr(&mut mix, m.finish(), signal_power, snr);
            interferer_azimuth = Some(az);
        }
    }
    if let Some(snr) = enabled(spec.diffuse_snr_db) {
        let mut m = Mixer::new(geometry.num_mics(), len);
        for k in 0..DIFFUSE_WAVES {
            let noise: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
            let dir = LookingDirection::horizontal(2.0 * PI * k as f64 / DIFFUSE_WAVES as f64);
            m.add(geometry, &noise, fs, &dir, 1.0);
        }
        add_at_snr(&mut mix, m.finish(), signal_power, snr);
    }
    Ok(SceneItem {
        noisy: Waveform::new(mix, fs)?,
        clean: Waveform::mono(source, fs)?,
        interferer_azimuth,
    })
}

/// RNG of item `index`: stream `index` of the ChaCha generator seeded by
/// `seed`, so items are independent and can be rendered in any order.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `count` deterministic scenes; item `i` uses [`item_rng`]`(spec.seed, i)`.
pub fn make_dataset(spec: &SceneSpec, geometry: &ArrayGeometry, count: usize) -> Result<Vec<SceneItem>> {
    (0..count)
        .map(|i| render_scene(spec, geometry, &mut item_rng(spec.seed, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(source: SourceKind) -> SceneSpec {
        SceneSpec {
            source,
            interferer: None,
            diffuse_snr_db: None,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn integer_delay_is_a_rotation() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let y = fractional_delay(&x, 3.0);
        for i in 0..16 {
            assert!((y[(i + 3) % 16] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn delay_preserves_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = SourceKind::NoiseBursts { low_hz: 100.0, high_hz: 6000.0 }.generate(16000, 16000.0, &mut rng);
        let e0: f64 = x.iter().map(|v| v * v).sum();
        let e1: f64 = fractional_delay(&x, 2.33).iter().map(|v| v * v).sum();
        assert!(((e1 - e0) / e0).abs() < 1e-3);
    }

    #[test]
    fn endfire_pair_delay() {
        let g = ArrayGeometry::new(vec![[0.0; 3], [0.05, 0.0, 0.0]], 343.0).unwrap();
        let taus = g.delays(&LookingDirection::horizontal(0.0));
        let d = (taus[0] - taus[1]) * 16000.0;
        assert!((d - 0.05 / 343.0 * 16000.0).abs() < 1e-12);
        assert!((d - 2.33).abs() < 0.01);
    }

    #[test]
    fn broadside_channels_identical() {
        let g = ArrayGeometry::new(vec![[-0.04, 0.0, 0.0], [0.04, 0.0, 0.0]], 343.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = SourceKind::default().generate(4000, 16000.0, &mut rng);
        let w = simulate_plane_wave(&g, &src, 16000.0, &LookingDirection::horizontal(PI / 2.0)).unwrap();
        for (a, b) in w.channel(0).iter().zip(w.channel(1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn snr_is_exact() {
        let g = ArrayGeometry::circular(0.0425, 6, true, 343.0).unwrap().subarray(&[0, 3]).unwrap();
        let spec = SceneSpec {
            interferer: Some(InterfererSpec {
                source: SourceKind::Chirp { start_hz: 300.0, end_hz: 3000.0 },
                azimuth: Some(1.0),
                snr_db: 5.0,
            }),
            diffuse_snr_db: None,
            ..SceneSpec::default()
        };
        let item = render_scene(&spec, &g, &mut item_rng(7, 0)).unwrap();
        let quiet_item = render_scene(&quiet(spec.source.clone()), &g, &mut item_rng(7, 0)).unwrap();
        let s = quiet_item.noisy.channels().to_vec();
        let residual: Vec<Vec<f64>> = item
            .noisy
            .channels()
            .iter()
            .zip(&s)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        let snr = 10.0 * (power(&s) / power(&residual)).log10();
        assert!((snr - 5.0).abs() < 0.1, "{snr}");
    }

    #[test]
    fn dataset_is_seeded() {
        let g = ArrayGeometry::circular(0.0425, 6, true, 343.0).unwrap().subarray(&[0, 3]).unwrap();
        let spec = SceneSpec { duration: 0.2, ..SceneSpec::default() };
        let a = make_dataset(&spec, &g, 3).unwrap();
        let b = make_dataset(&spec, &g, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].clean, a[1].clean);
    }

    #[test]
    fn invalid_duration_rejected() {
        let spec = SceneSpec { duration: 0.05, ..SceneSpec::default() };
        assert!(matches!(spec.validate(), Err(Error::Config { .. })));
    }
}
