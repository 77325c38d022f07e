//! Synthetic speech-like material with phoneme labels, plus synthetic noise
//! and room responses, for experiments that must run without external data.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::degradation::{AssetStore, NoiseCategory};

/// Label 0 is the CTC blank.
pub const BLANK: usize = 0;

/// `(F1, F2)` for voiced units; `None` marks a fricative.
const UNITS: [Option<(f64, f64)>; 6] = [
    Some((700.0, 1200.0)),
    Some((300.0, 2300.0)),
    Some((320.0, 800.0)),
    Some((500.0, 1800.0)),
    Some((450.0, 950.0)),
    None,
];

/// Number of classes including the blank.
pub const NUM_CLASSES: usize = UNITS.len() + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub min_unit_seconds: f64,
    pub max_unit_seconds: f64,
    pub max_gap_seconds: f64,
    pub edge_seconds: f64,
    pub peak: f64,
    /// RMS of the white background added after peak normalisation.
    pub noise_floor: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_rate: 8000,
            min_unit_seconds: 0.07,
            max_unit_seconds: 0.15,
            max_gap_seconds: 0.04,
            edge_seconds: 0.04,
            peak: 0.5,
            noise_floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticUtterance {
    pub audio: AudioBuffer,
    /// Unit labels in order, `1..NUM_CLASSES`.
    pub labels: Vec<usize>,
    /// `(start, end, label)` in samples.
    pub segments: Vec<(usize, usize, usize)>,
}

fn ramp(n: usize, len: usize, ramp_len: usize) -> f64 {
    let r = ramp_len.min(len / 2).max(1) as f64;
    let edge = (n.min(len - 1 - n)) as f64;
    if edge >= r {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge / r).cos()
    }
}

fn voiced(out: &mut [f64], sr: f64, f0: f64, formants: (f64, f64), rng: &mut ChaCha8Rng) {
    let harmonics = ((0.45 * sr) / f0).floor() as usize;
    let bw = 90.0;
    let amps: Vec<f64> = (1..=harmonics)
        .map(|k| {
            let f = k as f64 * f0;
            let g = |c: f64| (-(f - c).powi(2) / (2.0 * bw * bw)).exp();
            g(formants.0) + 0.7 * g(formants.1) + 0.02 / k as f64
        })
        .collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let glide = rng.gen_range(-0.1..0.1);
    let len = out.len();
    let mut phase = 0.0;
    for (n, o) in out.iter_mut().enumerate() {
        let f = f0 * (1.0 + glide * n as f64 / len as f64);
        phase += 2.0 * PI * f / sr;
        *o = amps
            .iter()
            .zip(&phases)
            .enumerate()
            .map(|(k, (a, p))| a * ((k + 1) as f64 * phase + p).sin())
            .sum();
    }
}

fn fricative(out: &mut [f64], rng: &mut ChaCha8Rng) {
    let white: Vec<f64> = (0..out.len() + 2).map(|_| rng.sample(StandardNormal)).collect();
    for (n, o) in out.iter_mut().enumerate() {
        // second difference tilts the spectrum towards high frequencies
        *o = 0.25 * (white[n + 2] - 2.0 * white[n + 1] + white[n]);
    }
}

/// One utterance of exactly `len` samples.
pub fn utterance(rng: &mut ChaCha8Rng, cfg: &SynthConfig, len: usize) -> SyntheticUtterance {
    let sr = cfg.sample_rate as f64;
    let f0 = rng.gen_range(100.0..190.0);
    let edge = (cfg.edge_seconds * sr) as usize;
    let ramp_len = (0.01 * sr) as usize;
    let mut samples = vec![0.0; len];
    let mut labels = Vec::new();
    let mut segments = Vec::new();
    let mut pos = edge;
    loop {
        let dur = (rng.gen_range(cfg.min_unit_seconds..cfg.max_unit_seconds) * sr) as usize;
        if pos + dur + edge > len {
            break;
        }
        let mut label = rng.gen_range(1..NUM_CLASSES);
        if labels.last() == Some(&label) {
            label = label % (NUM_CLASSES - 1) + 1;
        }
        let mut seg = vec![0.0; dur];
        match UNITS[label - 1] {
            Some(f) => voiced(&mut seg, sr, f0, f, rng),
            None => fricative(&mut seg, rng),
        }
        let rms = (seg.iter().map(|v| v * v).sum::<f64>() / dur as f64).sqrt().max(1e-12);
        let gain = rng.gen_range(0.6..1.0) / rms;
        for (n, v) in seg.iter().enumerate() {
            samples[pos + n] = v * gain * ramp(n, dur, ramp_len);
        }
        labels.push(label);
        segments.push((pos, pos + dur, label));
        pos += dur + rng.gen_range(0..=(cfg.max_gap_seconds * sr) as usize);
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v *= cfg.peak / peak);
    }
    if cfg.noise_floor > 0.0 {
        for v in samples.iter_mut() {
            *v += cfg.noise_floor * rng.sample::<f64, _>(StandardNormal);
        }
    }
    SyntheticUtterance {
        audio: AudioBuffer::new(samples, cfg.sample_rate).expect("finite synthetic samples"),
        labels,
        segments,
    }
}

/// Coloured noise, a tonal "music" bed and two decaying room responses.
pub fn synthetic_assets(rng: &mut ChaCha8Rng, sample_rate: u32) -> AssetStore {
    let sr = sample_rate as f64;
    let n = 4 * sample_rate as usize;
    let mut store = AssetStore::new();

    let mut brown = Vec::with_capacity(n);
    let mut acc = 0.0;
    for _ in 0..n {
        let w: f64 = rng.sample(StandardNormal);
        acc = 0.98 * acc + w;
        brown.push(acc);
    }
    store.add_noise("babble_brown", AudioBuffer::new(brown, sample_rate).unwrap(), NoiseCategory::Noise);
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    store.add_noise("hiss_white", AudioBuffer::new(white, sample_rate).unwrap(), NoiseCategory::Noise);

    let chord = [220.0, 277.2, 329.6, 440.0];
    let music: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let beat = 0.6 + 0.4 * (2.0 * PI * 2.0 * t).sin().abs();
            beat * chord.iter().map(|f| (2.0 * PI * f * t).sin()).sum::<f64>()
        })
        .collect();
    store.add_noise("chord_loop", AudioBuffer::new(music, sample_rate).unwrap(), NoiseCategory::Music);

    for (i, &t60) in [0.25, 0.5].iter().enumerate() {
        let len = (t60 * sr) as usize;
        let decay = 6.9 / (t60 * sr);
        let mut h: Vec<f64> = (0..len)
            .map(|k| 0.3 * rng.sample::<f64, _>(StandardNormal) * (-decay * k as f64).exp())
            .collect();
        h[0] = 1.0;
        store.add_rir(format!("room{i}"), AudioBuffer::new(h, sample_rate).unwrap());
    }
    store
}
