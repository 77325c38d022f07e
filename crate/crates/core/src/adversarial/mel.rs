use serde::{Deserialize, Serialize};

use crate::audio::{mel_filterbank, window_values, SpectralConfig};
use crate::autograd::{Array, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to mel magnitudes before the logarithm.
pub const LOG_FLOOR: f64 = 1e-5;

/// Differentiable `log10` mel-magnitude transform.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogMel {
    pub fft_size: usize,
    pub hop_length: usize,
    window: Vec<f64>,
    /// `[bins, mels]`
    filterbank: Array,
}

impl LogMel {
    pub fn new(cfg: &SpectralConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let mut window = vec![0.0; cfg.fft_size];
        let off = (cfg.fft_size - cfg.window_length) / 2;
        window[off..off + cfg.window_length].copy_from_slice(&window_values(cfg.window, cfg.window_length));
        let fb = mel_filterbank(sample_rate, cfg.fft_size, cfg.mel_bins, cfg.fmin, cfg.fmax_for(sample_rate));
        Ok(LogMel {
            fft_size: cfg.fft_size,
            hop_length: cfg.hop_length,
            window,
            filterbank: fb.t().to_owned().into_dyn(),
        })
    }

    pub fn mel_bins(&self) -> usize {
        self.filterbank.shape()[1]
    }

    /// `[B, T]` → `[B, T / hop + 1, mels]`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mag = x.stft_magnitude(self.fft_size, self.hop_length, &self.window);
        mag.matmul(&Tensor::constant(self.filterbank.clone()))
            .clamp_min(LOG_FLOOR)
            .log10()
    }
}

/// Mean absolute difference of log-mel spectrograms.
pub fn mel_loss(reference: &Tensor, estimate: &Tensor, mel: &LogMel) -> Result<Tensor> {
    if reference.shape() != estimate.shape() || reference.ndim() != 2 {
        return Err(Error::InvalidInput(format!(
            "mel loss needs equal [batch, samples] shapes, got {:?} and {:?}",
            reference.shape(),
            estimate.shape()
        )));
    }
    Ok(mel.forward(reference).sub(&mel.forward(estimate)).abs().mean())
}
