//! Seeded, replayable simulation of degraded speech.

mod assets;
mod ops;

pub use assets::{to_rate, AssetInfo, AssetStore, NoiseCategory};
pub use ops::{
    apply_band_limit, apply_clipping, apply_misc, apply_packet_loss, apply_reverb, convolve_full, mix_at_snr,
    noise_scale, ClipMode, MiscDistortion, EQ_BANDS,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

/// One entry of a recipe, with every parameter needed to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationStep {
    Noise { asset: String, offset: usize, snr_db: f64 },
    Reverb { asset: String },
    BandLimit { cutoff_hz: f64 },
    Eq { gains_db: Vec<f64> },
    /// `level` is a fraction of the signal peak at the time the step runs.
    ClipClamp { level: f64 },
    ClipTanh { level: f64 },
    ClipSigmoid { level: f64 },
    Attenuation { gain_db: f64 },
    /// Bursts as `(start, duration)` fractions of the signal length.
    PacketLoss { bursts: Vec<(f64, f64)> },
    CodecApprox { bits: u32 },
}

impl DegradationStep {
    /// Distortion family, or `None` for noise and reverb.
    pub fn family(&self) -> Option<Family> {
        match self {
            DegradationStep::Noise { .. } | DegradationStep::Reverb { .. } => None,
            DegradationStep::BandLimit { .. } => Some(Family::BandLimit),
            DegradationStep::Eq { .. } => Some(Family::Eq),
            DegradationStep::ClipClamp { .. } | DegradationStep::ClipTanh { .. } | DegradationStep::ClipSigmoid { .. } => {
                Some(Family::Clip)
            }
            DegradationStep::Attenuation { .. } => Some(Family::Attenuation),
            DegradationStep::PacketLoss { .. } => Some(Family::PacketLoss),
            DegradationStep::CodecApprox { .. } => Some(Family::Codec),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BandLimit,
    Eq,
    Clip,
    Attenuation,
    PacketLoss,
    Codec,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::BandLimit,
        Family::Eq,
        Family::Clip,
        Family::Attenuation,
        Family::PacketLoss,
        Family::Codec,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    pub seed: u64,
    pub steps: Vec<DegradationStep>,
}

impl DegradationRecipe {
    pub fn identity(seed: u64) -> Self {
        DegradationRecipe { seed, steps: vec![] }
    }

    /// Number of steps that are neither noise nor reverb.
    pub fn distortion_count(&self) -> usize {
        self.steps.iter().filter(|s| s.family().is_some()).count()
    }

    pub fn snr_db(&self) -> Option<f64> {
        self.steps.iter().find_map(|s| match s {
            DegradationStep::Noise { snr_db, .. } => Some(*snr_db),
            _ => None,
        })
    }
}

/// Ranges the recipe sampler draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationConfig {
    pub sample_rate: u32,
    pub snr_range_db: (f64, f64),
    pub music_snr_range_db: (f64, f64),
    pub reverb_probability: f64,
    pub min_distortions: usize,
    pub max_distortions: usize,
    pub families: Vec<Family>,
    /// Band-limit cutoff range as fractions of the Nyquist frequency.
    pub band_limit_range: (f64, f64),
    pub eq_range_db: f64,
    pub attenuation_range_db: (f64, f64),
    /// Clipping level range as fractions of the signal peak.
    pub clip_level_range: (f64, f64),
    pub max_bursts: usize,
    /// Longest single burst as a fraction of the signal length.
    pub max_burst_fraction: f64,
    pub codec_bits: Vec<u32>,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            sample_rate: 8000,
            snr_range_db: (-5.0, 30.0),
            music_snr_range_db: (-10.0, 5.0),
            reverb_probability: 0.5,
            min_distortions: 1,
            max_distortions: 5,
            families: Family::ALL.to_vec(),
            band_limit_range: (0.25, 0.75),
            eq_range_db: 12.0,
            attenuation_range_db: (-24.0, 0.0),
            clip_level_range: (0.1, 0.7),
            max_bursts: 3,
            max_burst_fraction: 0.15,
            codec_bits: vec![6, 8, 10],
        }
    }
}

/// Mixes a global seed and an item index into an independent per-item seed
/// (splitmix64 finaliser), so results do not depend on worker scheduling.
pub fn item_seed(global_seed: u64, index: u64) -> u64 {
    let mut z = global_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_family(rng: &mut ChaCha8Rng, family: Family, cfg: &DegradationConfig) -> DegradationStep {
    match family {
        Family::BandLimit => {
            let (lo, hi) = cfg.band_limit_range;
            let nyq = cfg.sample_rate as f64 / 2.0;
            DegradationStep::BandLimit {
                cutoff_hz: nyq * rng.gen_range(lo..hi),
            }
        }
        Family::Eq => DegradationStep::Eq {
            gains_db: (0..EQ_BANDS)
                .map(|_| rng.gen_range(-cfg.eq_range_db..=cfg.eq_range_db))
                .collect(),
        },
        Family::Clip => {
            let level = rng.gen_range(cfg.clip_level_range.0..cfg.clip_level_range.1);
            match rng.gen_range(0..3) {
                0 => DegradationStep::ClipClamp { level },
                1 => DegradationStep::ClipTanh { level },
                _ => DegradationStep::ClipSigmoid { level },
            }
        }
        Family::Attenuation => DegradationStep::Attenuation {
            gain_db: rng.gen_range(cfg.attenuation_range_db.0..=cfg.attenuation_range_db.1),
        },
        Family::PacketLoss => {
            let n = rng.gen_range(1..=cfg.max_bursts.max(1));
            // one burst per equal slot keeps bursts disjoint
            let slot = 1.0 / n as f64;
            let bursts = (0..n)
                .map(|i| {
                    let dur = rng.gen_range(0.0..cfg.max_burst_fraction.min(slot));
                    let start = i as f64 * slot + rng.gen_range(0.0..(slot - dur));
                    (start, dur)
                })
                .collect();
            DegradationStep::PacketLoss { bursts }
        }
        Family::Codec => DegradationStep::CodecApprox {
            bits: *cfg.codec_bits.choose(rng).expect("codec bit depths configured"),
        },
    }
}

/// Draws a recipe fully determined by `seed`: optional reverb, additive noise
/// when noise assets exist, then one to five distinct distortion families in
/// random order.
pub fn sample_recipe(seed: u64, cfg: &DegradationConfig, assets: &AssetStore) -> DegradationRecipe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::new();
    if !assets.rir_ids().is_empty() && rng.gen_bool(cfg.reverb_probability.clamp(0.0, 1.0)) {
        let ids = assets.rir_ids();
        steps.push(DegradationStep::Reverb {
            asset: ids[rng.gen_range(0..ids.len())].clone(),
        });
    }
    let noise_ids = assets.noise_ids();
    if !noise_ids.is_empty() {
        let id = noise_ids[rng.gen_range(0..noise_ids.len())].clone();
        let (noise, category) = assets.noise(&id).expect("listed noise id resolves");
        let (lo, hi) = match category {
            NoiseCategory::Noise => cfg.snr_range_db,
            NoiseCategory::Music => cfg.music_snr_range_db,
        };
        steps.push(DegradationStep::Noise {
            offset: rng.gen_range(0..noise.len().max(1)),
            snr_db: rng.gen_range(lo..=hi),
            asset: id,
        });
    }
    let max = cfg.max_distortions.min(cfg.families.len());
    let min = cfg.min_distortions.min(max);
    let count = rng.gen_range(min..=max);
    let mut families = cfg.families.clone();
    families.shuffle(&mut rng);
    for &f in families.iter().take(count) {
        steps.push(sample_family(&mut rng, f, cfg));
    }
    DegradationRecipe { seed, steps }
}

/// One line of a degradation manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean_path: Option<String>,
    pub degraded_path: Option<String>,
    pub recipe: DegradationRecipe,
    /// Gain applied after all steps (1 unless the output exceeded full scale).
    pub normalization: f64,
}

/// Applies `recipe` in order. Output has the input length and is
/// peak-normalised only when it would exceed full scale.
pub fn degrade(clean: &AudioBuffer, recipe: &DegradationRecipe, assets: &AssetStore) -> Result<(AudioBuffer, ManifestEntry)> {
    let mut x = clean.clone();
    for step in &recipe.steps {
        x = apply_step(&x, step, assets)?;
    }
    let peak = x.peak();
    let normalization = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if normalization != 1.0 {
        x = x.scaled(normalization);
    }
    debug_assert_eq!(x.len(), clean.len());
    Ok((
        x,
        ManifestEntry {
            clean_path: None,
            degraded_path: None,
            recipe: recipe.clone(),
            normalization,
        },
    ))
}

fn apply_step(x: &AudioBuffer, step: &DegradationStep, assets: &AssetStore) -> Result<AudioBuffer> {
    match step {
        DegradationStep::Noise { asset, offset, snr_db } => {
            let (noise, _) = assets.noise(asset)?;
            check_rate(x, noise, asset)?;
            if noise.is_empty() {
                return Err(Error::InvalidAsset(format!("noise `{asset}` is empty")));
            }
            let rotated = AudioBuffer {
                samples: (0..noise.len()).map(|i| noise.samples[(i + offset) % noise.len()]).collect(),
                sample_rate: noise.sample_rate,
            };
            mix_at_snr(x, &rotated, *snr_db).map_err(|e| match e {
                Error::InvalidAsset(m) => Error::InvalidAsset(format!("noise `{asset}`: {m}")),
                other => other,
            })
        }
        DegradationStep::Reverb { asset } => {
            let rir = assets.rir(asset)?;
            check_rate(x, rir, asset)?;
            apply_reverb(x, rir).map_err(|e| match e {
                Error::InvalidAsset(m) => Error::InvalidAsset(format!("rir `{asset}`: {m}")),
                other => other,
            })
        }
        DegradationStep::BandLimit { cutoff_hz } => apply_band_limit(x, *cutoff_hz),
        DegradationStep::Eq { gains_db } => apply_misc(
            x,
            &MiscDistortion::Eq {
                gains_db: gains_db.clone(),
            },
        ),
        DegradationStep::ClipClamp { level } => clip_relative(x, ClipMode::Clamp, *level),
        DegradationStep::ClipTanh { level } => clip_relative(x, ClipMode::Tanh, *level),
        DegradationStep::ClipSigmoid { level } => clip_relative(x, ClipMode::Sigmoid, *level),
        DegradationStep::Attenuation { gain_db } => apply_misc(x, &MiscDistortion::Attenuation { gain_db: *gain_db }),
        DegradationStep::PacketLoss { bursts } => {
            let dur = x.duration_seconds();
            let secs: Vec<(f64, f64)> = bursts.iter().map(|&(s, d)| (s * dur, d * dur)).collect();
            apply_packet_loss(x, &secs)
        }
        DegradationStep::CodecApprox { bits } => apply_misc(x, &MiscDistortion::CodecApprox { bits: *bits }),
    }
}

fn clip_relative(x: &AudioBuffer, mode: ClipMode, level: f64) -> Result<AudioBuffer> {
    if !(level > 0.0) {
        return Err(Error::InvalidRecipe(format!("clip level {level} must be positive")));
    }
    let peak = x.peak();
    if peak == 0.0 {
        return Ok(x.clone());
    }
    Ok(apply_clipping(x, mode, level * peak))
}

fn check_rate(x: &AudioBuffer, asset: &AudioBuffer, id: &str) -> Result<()> {
    if x.sample_rate != asset.sample_rate {
        return Err(Error::InvalidAsset(format!(
            "asset `{id}` is at {} Hz but the signal is at {} Hz; resample the store first",
            asset.sample_rate, x.sample_rate
        )));
    }
    Ok(())
}
