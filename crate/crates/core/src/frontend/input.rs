use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{stack_frames, stft, StackedFeatures, StftConfig, Waveform};
use crate::tensor::Tensor;

/// Waveform-to-feature pipeline shared by inputs and reconstruction targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: f64,
    pub stft: StftConfig,
    /// Frames stacked to the left of the current one.
    pub stack_left: usize,
    pub stack_stride: usize,
    /// Multiplier on STFT values; `None` means `1 / sqrt(n_fft)`.
    pub scale: Option<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000.0,
            stft: StftConfig::default(),
            stack_left: 2,
            stack_stride: 3,
            scale: None,
        }
    }
}

impl FeatureConfig {
    pub fn bins(&self) -> Result<usize> {
        Ok(self.stft.sizes(self.sample_rate)?.bins())
    }

    /// Centre frequency of every STFT bin in Hz.
    pub fn bin_freqs(&self) -> Result<Vec<f64>> {
        let sizes = self.stft.sizes(self.sample_rate)?;
        Ok((0..sizes.bins()).map(|k| k as f64 * self.sample_rate / sizes.n_fft as f64).collect())
    }

    pub fn frames_per_stack(&self) -> usize {
        self.stack_left + 1
    }

    pub fn effective_scale(&self) -> Result<f64> {
        Ok(self.scale.unwrap_or(1.0 / (self.stft.sizes(self.sample_rate)?.n_fft as f64).sqrt()))
    }

    /// Scaled stacked features of every channel of `w`.
    pub fn extract(&self, w: &Waveform) -> Result<Vec<StackedFeatures>> {
        if (w.sample_rate() - self.sample_rate).abs() > 1e-9 {
            return Err(Error::invalid(
                "features",
                format!("waveform rate {} differs from configured {}", w.sample_rate(), self.sample_rate),
            ));
        }
        let scale = self.effective_scale()?;
        stft(w, &self.stft)?
            .iter()
            .map(|s| {
                let mut st = stack_frames(s, self.stack_left, self.stack_stride)?;
                st.data.data_mut().iter_mut().for_each(|x| *x *= scale);
                Ok(st)
            })
            .collect()
    }
}

/// Per-utterance constant inputs of a front-end.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendInput {
    /// One `[S, frames_per_stack, B, 2]` tensor per microphone.
    mics: Vec<Tensor>,
}

impl FrontendInput {
    pub fn from_stacked(stacked: &[StackedFeatures]) -> Result<Self> {
        let first = stacked.first().ok_or_else(|| Error::invalid("frontend input", "no channels"))?;
        let shape = [first.num_stacks(), first.frames_per_stack, first.bins, 2];
        let mics = stacked
            .iter()
            .map(|s| {
                if s.data.shape() != first.data.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "frontend input",
                        left: first.data.shape().to_vec(),
                        right: s.data.shape().to_vec(),
                    });
                }
                s.data.clone().reshape(&shape)
            })
            .collect::<Result<_>>()?;
        Ok(Self { mics })
    }

    pub fn from_waveform(w: &Waveform, features: &FeatureConfig) -> Result<Self> {
        Self::from_stacked(&features.extract(w)?)
    }

    /// Builds an input directly from `[S, F, B, 2]` tensors.
    pub fn from_tensors(mics: Vec<Tensor>) -> Result<Self> {
        let first = mics.first().ok_or_else(|| Error::invalid("frontend input", "no channels"))?;
        if first.rank() != 4 || first.shape()[3] != 2 || mics.iter().any(|m| m.shape() != first.shape()) {
            return Err(Error::invalid("frontend input", "expected equal [S, F, B, 2] tensors"));
        }
        Ok(Self { mics })
    }

    pub fn num_mics(&self) -> usize {
        self.mics.len()
    }

    pub fn stacks(&self) -> usize {
        self.mics[0].shape()[0]
    }

    pub fn frames_per_stack(&self) -> usize {
        self.mics[0].shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.mics[0].shape()[2]
    }

    pub fn mic(&self, i: usize) -> &Tensor {
        &self.mics[i]
    }

    /// Channels in reverse order.
    pub fn swapped(&self) -> Self {
        Self {
            mics: self.mics.iter().rev().cloned().collect(),
        }
    }

    /// `[S, 2, F, B]`: real/imag as convolution channels over a frames x bins plane.
    pub(crate) fn embedding_input(&self, mic: usize) -> Result<Tensor> {
        self.mics[mic].permute(&[0, 3, 1, 2])
    }

    /// `[S, F, 2B]`, interleaved (re, im) per bin.
    pub(crate) fn flat_input(&self, mic: usize) -> Result<Tensor> {
        let (s, f, b) = (self.stacks(), self.frames_per_stack(), self.bins());
        self.mics[mic].clone().reshape(&[s, f, 2 * b])
    }

    /// `[S * F, B, N, 2]` for the filter-and-sum beamformer.
    pub(crate) fn beamformer_input(&self) -> Result<Tensor> {
        let (s, f, b, n) = (self.stacks(), self.frames_per_stack(), self.bins(), self.num_mics());
        let mut data = vec![0.0; s * f * b * n * 2];
        for (c, m) in self.mics.iter().enumerate() {
            for (idx, pair) in m.data().chunks_exact(2).enumerate() {
                let (frame, bin) = (idx / b, idx % b);
                let o = ((frame * b + bin) * n + c) * 2;
                data[o] = pair[0];
                data[o + 1] = pair[1];
            }
        }
        Tensor::new(&[s * f, b, n, 2], data)
    }
}
