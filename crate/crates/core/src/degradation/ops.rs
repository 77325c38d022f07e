use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::audio::{design_lowpass_fir, AudioBuffer};
use crate::error::{Error, Result};
use crate::fftcache;

/// Scales `noise` (tiled or cropped to the clean length) so the mixture has
/// the requested SNR over the whole utterance. The clean part is unscaled.
pub fn mix_at_snr(clean: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<AudioBuffer> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::InvalidInput(format!(
            "sample rates differ: {} vs {}",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if noise.is_empty() {
        return Err(Error::InvalidAsset("empty noise signal".into()));
    }
    let n: Vec<f64> = (0..clean.len()).map(|i| noise.samples[i % noise.len()]).collect();
    let pn = n.iter().map(|v| v * v).sum::<f64>() / n.len().max(1) as f64;
    if pn == 0.0 {
        return Err(Error::InvalidAsset("noise has zero power".into()));
    }
    let scale = noise_scale(clean.power(), pn, snr_db);
    Ok(AudioBuffer {
        samples: clean.samples.iter().zip(&n).map(|(c, v)| c + scale * v).collect(),
        sample_rate: clean.sample_rate,
    })
}

/// Gain applied to noise of power `noise_power` to reach `snr_db`.
pub fn noise_scale(clean_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (clean_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Full linear convolution.
pub fn convolve_full(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    if x.len().min(h.len()) <= 64 {
        let mut y = vec![0.0; out_len];
        for (i, xv) in x.iter().enumerate() {
            for (k, hv) in h.iter().enumerate() {
                y[i + k] += xv * hv;
            }
        }
        return y;
    }
    let n = out_len.next_power_of_two();
    let fwd = fftcache::plan(n, false);
    let inv = fftcache::plan(n, true);
    let mut a: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    a.resize(n, Complex64::new(0.0, 0.0));
    let mut b: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    b.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a[..out_len].iter().map(|c| c.re / n as f64).collect()
}

/// Convolves with `rir`, aligned so the RIR's largest tap lands at zero delay,
/// trimmed to the input length and rescaled to the input RMS.
pub fn apply_reverb(clean: &AudioBuffer, rir: &AudioBuffer) -> Result<AudioBuffer> {
    if rir.is_empty() || rir.samples.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidAsset("impulse response is empty or silent".into()));
    }
    if clean.sample_rate != rir.sample_rate {
        return Err(Error::InvalidInput(format!(
            "sample rates differ: {} vs {}",
            clean.sample_rate, rir.sample_rate
        )));
    }
    let peak = rir
        .samples
        .iter()
        .enumerate()
        .fold((0, 0.0), |(bi, bv), (i, &v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
        .0;
    let full = convolve_full(&clean.samples, &rir.samples);
    let mut samples: Vec<f64> = full[peak..peak + clean.len()].to_vec();
    let out_rms = (samples.iter().map(|v| v * v).sum::<f64>() / samples.len().max(1) as f64).sqrt();
    let in_rms = clean.rms();
    if out_rms > 0.0 {
        let g = in_rms / out_rms;
        samples.iter_mut().for_each(|v| *v *= g);
    }
    Ok(AudioBuffer {
        samples,
        sample_rate: clean.sample_rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    Clamp,
    Tanh,
    Sigmoid,
}

pub fn apply_clipping(buffer: &AudioBuffer, mode: ClipMode, level: f64) -> AudioBuffer {
    assert!(level > 0.0, "clipping level must be positive");
    let f = |x: f64| match mode {
        ClipMode::Clamp => x.clamp(-level, level),
        ClipMode::Tanh => level * (x / level).tanh(),
        ClipMode::Sigmoid => level * (2.0 * crate::autograd::sigmoid(2.0 * x / level) - 1.0),
    };
    AudioBuffer {
        samples: buffer.samples.iter().map(|&x| f(x)).collect(),
        sample_rate: buffer.sample_rate,
    }
}

/// Zero-phase low-pass whose stopband starts at `cutoff_hz`.
pub fn apply_band_limit(buffer: &AudioBuffer, cutoff_hz: f64) -> Result<AudioBuffer> {
    let nyq = buffer.sample_rate as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyq) {
        return Err(Error::InvalidInput(format!("cutoff {cutoff_hz} Hz outside (0, {nyq})")));
    }
    let c = cutoff_hz / nyq;
    let width = 0.1 * c;
    let atten = 60.0;
    let mut taps = ((atten - 7.95) / (2.285 * PI * width)).ceil() as usize + 1;
    if taps % 2 == 0 {
        taps += 1;
    }
    let k = design_lowpass_fir(c - width / 2.0, taps, atten)?;
    let full = convolve_full(&buffer.samples, &k.taps);
    let d = (taps - 1) / 2;
    Ok(AudioBuffer {
        samples: full[d..d + buffer.len()].to_vec(),
        sample_rate: buffer.sample_rate,
    })
}

/// Zeroes each `(start_s, duration_s)` window, with 5 ms raised-cosine fades
/// just outside it.
pub fn apply_packet_loss(buffer: &AudioBuffer, bursts: &[(f64, f64)]) -> Result<AudioBuffer> {
    let sr = buffer.sample_rate as f64;
    let len = buffer.len();
    let mut windows: Vec<(usize, usize)> = Vec::with_capacity(bursts.len());
    for &(start, dur) in bursts {
        if !(start >= 0.0 && dur >= 0.0) {
            return Err(Error::InvalidRecipe(format!("burst ({start}, {dur}) has negative extent")));
        }
        let s = (start * sr).round() as usize;
        let e = ((start + dur) * sr).round() as usize;
        if e > len {
            return Err(Error::InvalidRecipe(format!(
                "burst ({start} s, {dur} s) ends past the signal ({len} samples)"
            )));
        }
        windows.push((s, e));
    }
    let mut sorted = windows.clone();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::InvalidRecipe(format!(
                "bursts overlap: samples {:?} and {:?}",
                w[0], w[1]
            )));
        }
    }
    let ramp = (0.005 * sr).round() as usize;
    let fade = |i: usize| 0.5 * (1.0 + (PI * (i + 1) as f64 / (ramp + 1) as f64).cos());
    let mut samples = buffer.samples.clone();
    for &(s, e) in &windows {
        if e == s {
            continue;
        }
        for i in 0..ramp {
            // i counts away from the zeroed window
            if s > i {
                samples[s - 1 - i] *= 1.0 - fade(ramp - 1 - i);
            }
            if e + i < len {
                samples[e + i] *= 1.0 - fade(ramp - 1 - i);
            }
        }
        samples[s..e].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(AudioBuffer {
        samples,
        sample_rate: buffer.sample_rate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MiscDistortion {
    /// Gains in dB at eight log-spaced band centres.
    Eq { gains_db: Vec<f64> },
    Attenuation { gain_db: f64 },
    CodecApprox { bits: u32 },
}

pub const EQ_BANDS: usize = 8;

fn eq_centres(sample_rate: u32) -> Vec<f64> {
    let lo: f64 = 100.0;
    let hi = 0.8 * sample_rate as f64 / 2.0;
    (0..EQ_BANDS)
        .map(|i| lo * (hi / lo).powf(i as f64 / (EQ_BANDS - 1) as f64))
        .collect()
}

/// Gain in dB at `freq`, linear in log-frequency between band centres.
fn eq_curve(centres: &[f64], gains: &[f64], freq: f64) -> f64 {
    if freq <= centres[0] {
        return gains[0];
    }
    for i in 1..centres.len() {
        if freq <= centres[i] {
            let t = (freq.ln() - centres[i - 1].ln()) / (centres[i].ln() - centres[i - 1].ln());
            return gains[i - 1] + t * (gains[i] - gains[i - 1]);
        }
    }
    gains[gains.len() - 1]
}

pub fn apply_misc(buffer: &AudioBuffer, kind: &MiscDistortion) -> Result<AudioBuffer> {
    let sr = buffer.sample_rate;
    let samples = match kind {
        MiscDistortion::Attenuation { gain_db } => {
            let g = 10f64.powf(gain_db / 20.0);
            buffer.samples.iter().map(|v| v * g).collect()
        }
        MiscDistortion::Eq { gains_db } => {
            if gains_db.len() != EQ_BANDS {
                return Err(Error::InvalidRecipe(format!(
                    "eq needs {EQ_BANDS} band gains, got {}",
                    gains_db.len()
                )));
            }
            let centres = eq_centres(sr);
            let len = buffer.len();
            let n = (2 * len).next_power_of_two().max(2);
            let mut spec: Vec<Complex64> = buffer.samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            spec.resize(n, Complex64::new(0.0, 0.0));
            fftcache::plan(n, false).process(&mut spec);
            for (k, c) in spec.iter_mut().enumerate() {
                let bin = k.min(n - k);
                let f = bin as f64 * sr as f64 / n as f64;
                *c *= 10f64.powf(eq_curve(&centres, gains_db, f) / 20.0);
            }
            fftcache::plan(n, true).process(&mut spec);
            spec[..len].iter().map(|c| c.re / n as f64).collect()
        }
        MiscDistortion::CodecApprox { bits } => {
            if !(2..=16).contains(bits) {
                return Err(Error::InvalidRecipe(format!("codec bit depth {bits} outside 2..=16")));
            }
            let mu = 255.0f64;
            let levels = ((1u32 << (bits - 1)) - 1) as f64;
            buffer
                .samples
                .iter()
                .map(|&x| {
                    let x = x.clamp(-1.0, 1.0);
                    let y = x.signum() * (1.0 + mu * x.abs()).ln() / (1.0 + mu).ln();
                    let q = (y * levels).round() / levels;
                    q.signum() * ((1.0 + mu).powf(q.abs()) - 1.0) / mu
                })
                .collect()
        }
    };
    Ok(AudioBuffer {
        samples,
        sample_rate: sr,
    })
}
