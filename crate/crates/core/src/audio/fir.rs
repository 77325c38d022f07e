use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::AudioBuffer;
use crate::error::{Error, Result};

/// Linear-phase low-pass FIR filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterKernel {
    pub taps: Vec<f64>,
    /// Fraction of Nyquist where the ideal response is cut.
    pub cutoff_norm: f64,
    pub stopband_attenuation_db: f64,
}

impl FilterKernel {
    /// Magnitude response at `freq_norm` (fraction of Nyquist).
    pub fn response(&self, freq_norm: f64) -> f64 {
        let w = PI * freq_norm;
        let c = (self.taps.len() - 1) as f64 / 2.0;
        // symmetric taps: the response is real after removing the linear phase
        self.taps
            .iter()
            .enumerate()
            .map(|(n, h)| h * (w * (n as f64 - c)).cos())
            .sum::<f64>()
            .abs()
    }
}

/// Kaiser window shape parameter for a stopband attenuation in dB.
pub fn kaiser_beta(atten_db: f64) -> f64 {
    if atten_db > 50.0 {
        0.1102 * (atten_db - 8.7)
    } else if atten_db >= 21.0 {
        0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
    } else {
        0.0
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Attenuation a Kaiser design reaches with `num_taps` taps over a full
/// transition width of `width_norm` (fraction of Nyquist).
fn kaiser_achievable_db(num_taps: usize, width_norm: f64) -> f64 {
    2.285 * (num_taps - 1) as f64 * PI * width_norm + 7.95
}

/// Kaiser-windowed sinc low-pass.
///
/// The stopband is required to start at `1.2 * cutoff_norm`; a request that
/// `num_taps` cannot meet over that transition is rejected.
pub fn design_lowpass_fir(cutoff_norm: f64, num_taps: usize, stopband_db: f64) -> Result<FilterKernel> {
    if !(cutoff_norm > 0.0 && cutoff_norm < 1.0) {
        return Err(Error::Config(format!("cutoff {cutoff_norm} outside (0, 1)")));
    }
    if num_taps % 2 == 0 {
        return Err(Error::Config(format!("tap count {num_taps} must be odd")));
    }
    if !(stopband_db > 0.0) {
        return Err(Error::Config("stopband attenuation must be positive".into()));
    }
    let width = 0.4 * cutoff_norm;
    let achievable = kaiser_achievable_db(num_taps, width);
    if stopband_db > achievable {
        return Err(Error::FilterDesign {
            requested_db: stopband_db,
            achievable_db: achievable,
            num_taps,
        });
    }
    let beta = kaiser_beta(stopband_db);
    let m = (num_taps - 1) as f64;
    let i0b = bessel_i0(beta);
    let mut taps: Vec<f64> = (0..num_taps)
        .map(|n| {
            let r = if m == 0.0 { 0.0 } else { 2.0 * n as f64 / m - 1.0 };
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            cutoff_norm * sinc(cutoff_norm * (n as f64 - m / 2.0)) * w
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    // enforce exact symmetry after normalisation
    for n in 0..num_taps / 2 {
        let avg = 0.5 * (taps[n] + taps[num_taps - 1 - n]);
        taps[n] = avg;
        taps[num_taps - 1 - n] = avg;
    }
    Ok(FilterKernel {
        taps,
        cutoff_norm,
        stopband_attenuation_db: stopband_db,
    })
}

/// 60 dB kernel for a rate change by `factor`: the stopband starts exactly at
/// the new Nyquist and the passband extends to 0.8 of it.
pub fn antialias_kernel(factor: usize) -> FilterKernel {
    if factor <= 1 {
        return FilterKernel {
            taps: vec![1.0],
            cutoff_norm: 1.0,
            stopband_attenuation_db: f64::INFINITY,
        };
    }
    let atten = 60.0;
    let width = 0.2 / factor as f64;
    let mut taps = ((atten - 7.95) / (2.285 * PI * width)).ceil() as usize + 1;
    if taps % 2 == 0 {
        taps += 1;
    }
    design_lowpass_fir(0.9 / factor as f64, taps, atten).expect("antialias kernel parameters are feasible")
}

/// Rational resampling: zero-stuff by `up`, filter with `kernel` (gain `up`),
/// keep every `down`-th sample. The kernel is specified at the intermediate
/// rate and should cut at `1 / max(up, down)`.
pub fn resample_by_factor(buffer: &AudioBuffer, up: usize, down: usize, kernel: &FilterKernel) -> AudioBuffer {
    assert!(up >= 1 && down >= 1, "resampling factors must be positive");
    let rate = ((buffer.sample_rate as u64 * up as u64 + down as u64 / 2) / down as u64) as u32;
    if up == 1 && down == 1 {
        return AudioBuffer {
            samples: buffer.samples.clone(),
            sample_rate: rate,
        };
    }
    let len = buffer.len();
    let out_len = (len * up).div_ceil(down);
    let h = &kernel.taps;
    let c = (h.len() - 1) / 2;
    let g = up as f64;
    let samples = (0..out_len)
        .map(|m| {
            let base = (m * down) as isize - c as isize;
            let mut k = (-base).rem_euclid(up as isize) as usize;
            let mut acc = 0.0;
            while k < h.len() {
                let j = (base + k as isize) / up as isize;
                if j >= 0 && (j as usize) < len {
                    acc += h[k] * buffer.samples[j as usize];
                }
                k += up;
            }
            acc * g
        })
        .collect();
    AudioBuffer {
        samples,
        sample_rate: rate,
    }
}
