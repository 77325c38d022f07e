use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex64;

use super::{AudioBuffer, SpectralConfig, Window};
use crate::error::{Error, Result};
use crate::fftcache;

/// Periodic analysis window of length `len`.
pub fn window_values(window: Window, len: usize) -> Vec<f64> {
    match window {
        Window::Rectangular => vec![1.0; len],
        Window::Hann => (0..len)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
            .collect(),
    }
}

/// Window centred inside an `fft_size` frame.
fn framed_window(cfg: &SpectralConfig) -> Vec<f64> {
    let w = window_values(cfg.window, cfg.window_length);
    let off = (cfg.fft_size - cfg.window_length) / 2;
    let mut out = vec![0.0; cfg.fft_size];
    out[off..off + cfg.window_length].copy_from_slice(&w);
    out
}

/// One-sided short-time spectrum together with what is needed to invert it.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    /// `[frames, fft_size / 2 + 1]`
    pub data: Array2<Complex64>,
    pub length: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn power(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm_sqr())
    }
}

fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop) + 1
}

/// Frame `f` is centred on sample `f * hop`; the signal is implicitly
/// zero-extended by `fft_size / 2` on the left, giving `ceil(len / hop) + 1`
/// frames.
pub fn stft(buffer: &AudioBuffer, cfg: &SpectralConfig) -> Result<Spectrogram> {
    if buffer.is_empty() {
        return Err(Error::InvalidInput("stft of an empty buffer".into()));
    }
    cfg.validate(buffer.sample_rate)?;
    let n = cfg.fft_size;
    let len = buffer.len();
    let frames = frame_count(len, cfg.hop_length);
    let bins = n / 2 + 1;
    let w = framed_window(cfg);
    let fft = fftcache::plan(n, false);
    let mut data = Array2::zeros((frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for f in 0..frames {
        let start = (f * cfg.hop_length) as isize - (n / 2) as isize;
        for (k, v) in buf.iter_mut().enumerate() {
            let i = start + k as isize;
            let s = if i >= 0 && (i as usize) < len {
                buffer.samples[i as usize]
            } else {
                0.0
            };
            *v = Complex64::new(s * w[k], 0.0);
        }
        fft.process(&mut buf);
        for (k, c) in buf[..bins].iter().enumerate() {
            data[[f, k]] = *c;
        }
    }
    Ok(Spectrogram {
        data,
        length: len,
        sample_rate: buffer.sample_rate,
    })
}

/// Weighted overlap-add inverse of [`stft`].
pub fn istft(spec: &Spectrogram, cfg: &SpectralConfig) -> Result<AudioBuffer> {
    cfg.validate(spec.sample_rate)?;
    let n = cfg.fft_size;
    if spec.bins() != n / 2 + 1 {
        return Err(Error::Config(format!(
            "spectrogram has {} bins but fft size {n} needs {}",
            spec.bins(),
            n / 2 + 1
        )));
    }
    let len = spec.length;
    let w = framed_window(cfg);
    let mut acc = vec![0.0; len];
    let mut wsum = vec![0.0; len];
    let ifft = fftcache::plan(n, true);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for f in 0..spec.frames() {
        let start = (f * cfg.hop_length) as isize - (n / 2) as isize;
        for k in 0..n {
            buf[k] = if k <= n / 2 {
                spec.data[[f, k]]
            } else {
                spec.data[[f, n - k]].conj()
            };
        }
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        for k in 0..n {
            let i = start + k as isize;
            if i >= 0 && (i as usize) < len {
                acc[i as usize] += buf[k].re / n as f64 * w[k];
                wsum[i as usize] += w[k] * w[k];
            }
        }
    }
    if let Some(i) = wsum.iter().position(|&s| s < 1e-8) {
        return Err(Error::Config(format!(
            "window {:?} of length {} with hop {} leaves sample {i} uncovered",
            cfg.window, cfg.window_length, cfg.hop_length
        )));
    }
    let samples = acc.iter().zip(&wsum).map(|(a, s)| a / s).collect();
    Ok(AudioBuffer {
        samples,
        sample_rate: spec.sample_rate,
    })
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale, `[n_mels, fft_size / 2 + 1]`.
pub fn mel_filterbank(sample_rate: u32, fft_size: usize, n_mels: usize, fmin: f64, fmax: f64) -> Array2<f64> {
    let bins = fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / fft_size as f64;
            let v = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[[m, k]] = v;
        }
    }
    fb
}

/// Power mel spectrogram, shape `[mel_bins, frames]`.
pub fn mel_spectrogram(buffer: &AudioBuffer, cfg: &SpectralConfig) -> Result<Array2<f64>> {
    let spec = stft(buffer, cfg)?;
    let fb = mel_filterbank(
        buffer.sample_rate,
        cfg.fft_size,
        cfg.mel_bins,
        cfg.fmin,
        cfg.fmax_for(buffer.sample_rate),
    );
    Ok(fb.dot(&spec.power().t()))
}

/// Frame-averaged RMS difference of log power spectra, in dB.
pub fn log_spectral_distance(reference: &AudioBuffer, estimate: &AudioBuffer, cfg: &SpectralConfig) -> Result<f64> {
    if reference.len() != estimate.len() || reference.sample_rate != estimate.sample_rate {
        return Err(Error::InvalidInput(format!(
            "lsd needs matching signals, got {} samples @ {} Hz vs {} @ {} Hz",
            reference.len(),
            reference.sample_rate,
            estimate.len(),
            estimate.sample_rate
        )));
    }
    let a = stft(reference, cfg)?.power().mapv(|p| 10.0 * (p + 1e-10).log10());
    let b = stft(estimate, cfg)?.power().mapv(|p| 10.0 * (p + 1e-10).log10());
    let d = (a - b).mapv(|v| v * v);
    let per_frame = d.mean_axis(Axis(1)).unwrap().mapv(f64::sqrt);
    Ok(per_frame.mean().unwrap_or(0.0))
}
