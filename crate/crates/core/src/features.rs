//! Multi-channel waveforms, STFT analysis and low-frame-rate stacking.

use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Equal-length sample arrays, one per microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: f64,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::invalid("waveform", format!("sample rate {sample_rate} must be positive")));
        }
        let Some(first) = channels.first() else {
            return Err(Error::invalid("waveform", "at least one channel is required"));
        };
        if channels.iter().any(|c| c.len() != first.len()) {
            return Err(Error::invalid("waveform", "channels differ in length"));
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// New waveform holding the listed channels, in order.
    pub fn select(&self, picks: &[usize]) -> Result<Waveform> {
        let chans = picks
            .iter()
            .map(|&i| {
                self.channels
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid("waveform", format!("channel {i} out of range")))
            })
            .collect::<Result<_>>()?;
        Waveform::new(chans, self.sample_rate)
    }

    /// Reads 16-bit PCM WAV, normalizing by 1/32768.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::invalid(
                "read_wav",
                format!("only 16-bit PCM is supported, got {} bits {:?}", spec.bits_per_sample, spec.sample_format),
            ));
        }
        let n = spec.channels as usize;
        let mut channels = vec![Vec::new(); n];
        for (i, s) in reader.samples::<i16>().enumerate() {
            channels[i % n].push(s? as f64 / 32768.0);
        }
        Waveform::new(channels, spec.sample_rate as f64)
    }

    /// Writes 16-bit PCM WAV; samples are clipped to [-1, 1).
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: self.channels.len() as u16,
            sample_rate: self.sample_rate.round() as u32,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for t in 0..self.len() {
            for c in &self.channels {
                let v = (c[t] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                w.write_sample(v)?;
            }
        }
        w.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Rectangular => vec![1.0; len],
            // periodic Hann
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    /// FFT size; `None` picks the next power of two at or above the window.
    pub n_fft: Option<usize>,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            shift_ms: 10.0,
            n_fft: None,
            window: WindowKind::Hann,
        }
    }
}

/// Window, shift and FFT sizes in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSizes {
    pub window: usize,
    pub shift: usize,
    pub n_fft: usize,
}

impl FrameSizes {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

impl StftConfig {
    pub fn sizes(&self, sample_rate: f64) -> Result<FrameSizes> {
        let window = (self.window_ms * sample_rate / 1000.0).round() as usize;
        let shift = (self.shift_ms * sample_rate / 1000.0).round() as usize;
        if window == 0 || shift == 0 {
            return Err(Error::invalid("stft", "window and shift must each span at least one sample"));
        }
        let n_fft = self.n_fft.unwrap_or_else(|| window.next_power_of_two());
        if window > n_fft {
            return Err(Error::invalid("stft", format!("window of {window} samples exceeds n_fft {n_fft}")));
        }
        Ok(FrameSizes { window, shift, n_fft })
    }
}

/// `floor((len - window) / shift) + 1`, or `None` when shorter than a window.
pub fn frame_count(len: usize, window: usize, shift: usize) -> Option<usize> {
    (len >= window).then(|| (len - window) / shift + 1)
}

/// STFT of one channel in rectangular coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    /// `[T, B, 2]`, last axis (re, im).
    pub frames: Tensor,
    pub bin_freqs: Vec<f64>,
    /// Seconds between frames.
    pub frame_shift: f64,
}

impl ComplexSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_bins(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn get(&self, t: usize, b: usize) -> Complex64 {
        let i = (t * self.num_bins() + b) * 2;
        let d = self.frames.data();
        Complex64::new(d[i], d[i + 1])
    }
}

pub fn stft_channel(samples: &[f64], sample_rate: f64, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let sizes = cfg.sizes(sample_rate)?;
    let frames = frame_count(samples.len(), sizes.window, sizes.shift).ok_or(Error::SignalTooShort {
        samples: samples.len(),
        window: sizes.window,
    })?;
    let bins = sizes.bins();
    let win = cfg.window.coefficients(sizes.window);
    let fft = FftPlanner::new().plan_fft_forward(sizes.n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); sizes.n_fft];
    let mut out = Vec::with_capacity(frames * bins * 2);
    for t in 0..frames {
        let start = t * sizes.shift;
        buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        for (n, (z, w)) in buf.iter_mut().zip(&win).enumerate() {
            z.re = samples[start + n] * w;
        }
        fft.process(&mut buf);
        for z in &buf[..bins] {
            out.push(z.re);
            out.push(z.im);
        }
    }
    let bin_freqs = (0..bins).map(|k| k as f64 * sample_rate / sizes.n_fft as f64).collect();
    Ok(ComplexSpectrogram {
        frames: Tensor::new(&[frames, bins, 2], out)?,
        bin_freqs,
        frame_shift: sizes.shift as f64 / sample_rate,
    })
}

/// Per-channel STFT of a multi-channel waveform.
pub fn stft(waveform: &Waveform, cfg: &StftConfig) -> Result<Vec<ComplexSpectrogram>> {
    waveform
        .channels()
        .iter()
        .map(|c| stft_channel(c, waveform.sample_rate(), cfg))
        .collect()
}

/// Low-frame-rate features: each row holds `left + 1` consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedFeatures {
    /// `[S, frames_per_stack * bins * 2]`, frames oldest first.
    pub data: Tensor,
    pub frames_per_stack: usize,
    pub stride: usize,
    pub bins: usize,
}

impl StackedFeatures {
    pub fn num_stacks(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Stacks frames `[t - left, ..., t]` for `t = 0, stride, 2*stride, ...`,
/// zero-filling frames before the start.
pub fn stack_frames(spec: &ComplexSpectrogram, left: usize, stride: usize) -> Result<StackedFeatures> {
    if stride == 0 {
        return Err(Error::invalid("stack_frames", "stride must be positive"));
    }
    let (frames, bins) = (spec.num_frames(), spec.num_bins());
    let per = left + 1;
    let stacks = frames.div_ceil(stride);
    let frame_len = bins * 2;
    let src = spec.frames.data();
    let mut out = vec![0.0; stacks * per * frame_len];
    for s in 0..stacks {
        let t = s * stride;
        for j in 0..per {
            // frame index t - left + j
            if t + j < left {
                continue;
            }
            let f = t + j - left;
            let dst = (s * per + j) * frame_len;
            out[dst..dst + frame_len].copy_from_slice(&src[f * frame_len..(f + 1) * frame_len]);
        }
    }
    Ok(StackedFeatures {
        data: Tensor::new(&[stacks, per * frame_len], out)?,
        frames_per_stack: per,
        stride,
        bins,
    })
}
