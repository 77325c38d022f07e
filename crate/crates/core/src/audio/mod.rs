//! Mono waveforms, spectral transforms, anti-alias filter design and
//! the log-spectral distance.

mod fir;
mod spectral;
mod wav;

pub use fir::{antialias_kernel, design_lowpass_fir, kaiser_beta, resample_by_factor, FilterKernel};
pub use spectral::{
    istft, log_spectral_distance, mel_filterbank, mel_spectrogram, stft, window_values, Spectrogram,
};
pub use wav::{read_wav, write_wav, WavFormat};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A mono waveform with its sample rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at index {i}")));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        AudioBuffer {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, gain: f64) -> AudioBuffer {
        AudioBuffer {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Zero-pads at the end up to the next multiple of `multiple`.
    pub fn padded_to_multiple(&self, multiple: usize) -> AudioBuffer {
        let len = self.samples.len().div_ceil(multiple).max(1) * multiple;
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        AudioBuffer {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hann,
    Rectangular,
}

/// Framing and filterbank settings shared by transforms, losses and metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub window_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub window: Window,
    pub mel_bins: usize,
    pub fmin: f64,
    /// `None` means the Nyquist frequency of the signal.
    pub fmax: Option<f64>,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            window_length: 1024,
            hop_length: 256,
            fft_size: 1024,
            window: Window::Hann,
            mel_bins: 80,
            fmin: 0.0,
            fmax: None,
        }
    }
}

impl SpectralConfig {
    pub fn with_sizes(fft_size: usize, hop_length: usize) -> Self {
        SpectralConfig {
            window_length: fft_size,
            hop_length,
            fft_size,
            ..SpectralConfig::default()
        }
    }

    pub fn fmax_for(&self, sample_rate: u32) -> f64 {
        self.fmax.unwrap_or(sample_rate as f64 / 2.0)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.hop_length == 0 || self.hop_length > self.window_length || self.window_length > self.fft_size {
            return Err(Error::Config(format!(
                "need 0 < hop ({}) <= window ({}) <= fft size ({})",
                self.hop_length, self.window_length, self.fft_size
            )));
        }
        if self.mel_bins == 0 {
            return Err(Error::Config("mel_bins must be positive".into()));
        }
        let fmax = self.fmax_for(sample_rate);
        if !(self.fmin >= 0.0 && self.fmin < fmax && fmax <= sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "need 0 <= fmin ({}) < fmax ({fmax}) <= nyquist",
                self.fmin
            )));
        }
        Ok(())
    }
}
