use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{antialias_kernel, read_wav, resample_by_factor, AudioBuffer};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCategory {
    Noise,
    Music,
}

/// Noise and impulse-response inventories addressed by stable string ids.
#[derive(Clone, Debug, Default)]
pub struct AssetStore {
    noises: BTreeMap<String, (AudioBuffer, NoiseCategory)>,
    rirs: BTreeMap<String, AudioBuffer>,
}

/// Summary of one asset for index files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssetInfo {
    pub id: String,
    pub kind: String,
    pub samples: usize,
    pub seconds: f64,
}

impl AssetStore {
    pub fn new() -> Self {
        AssetStore::default()
    }

    pub fn add_noise(&mut self, id: impl Into<String>, buffer: AudioBuffer, category: NoiseCategory) {
        self.noises.insert(id.into(), (buffer, category));
    }

    pub fn add_rir(&mut self, id: impl Into<String>, buffer: AudioBuffer) {
        self.rirs.insert(id.into(), buffer);
    }

    /// Noise ids in sorted order.
    pub fn noise_ids(&self) -> Vec<String> {
        self.noises.keys().cloned().collect()
    }

    pub fn rir_ids(&self) -> Vec<String> {
        self.rirs.keys().cloned().collect()
    }

    pub fn noise(&self, id: &str) -> Result<(&AudioBuffer, NoiseCategory)> {
        self.noises
            .get(id)
            .map(|(b, c)| (b, *c))
            .ok_or_else(|| Error::AssetResolution(format!("noise:{id}")))
    }

    pub fn rir(&self, id: &str) -> Result<&AudioBuffer> {
        self.rirs
            .get(id)
            .ok_or_else(|| Error::AssetResolution(format!("rir:{id}")))
    }

    pub fn index(&self) -> Vec<AssetInfo> {
        let n = self.noises.iter().map(|(id, (b, c))| AssetInfo {
            id: id.clone(),
            kind: format!("{c:?}").to_lowercase(),
            samples: b.len(),
            seconds: b.duration_seconds(),
        });
        let r = self.rirs.iter().map(|(id, b)| AssetInfo {
            id: id.clone(),
            kind: "rir".into(),
            samples: b.len(),
            seconds: b.duration_seconds(),
        });
        n.chain(r).collect()
    }

    /// Loads every `*.wav` under the given directories, keyed by file stem.
    /// Files at another rate are resampled explicitly to `sample_rate`.
    pub fn load_dirs(noise_dir: Option<&Path>, music_dir: Option<&Path>, rir_dir: Option<&Path>, sample_rate: u32) -> Result<Self> {
        let mut store = AssetStore::new();
        for (dir, cat) in [(noise_dir, NoiseCategory::Noise), (music_dir, NoiseCategory::Music)] {
            if let Some(d) = dir {
                for p in wav_files(d)? {
                    let b = to_rate(read_wav(&p)?, sample_rate);
                    store.add_noise(stem(&p), b, cat);
                }
            }
        }
        if let Some(d) = rir_dir {
            for p in wav_files(d)? {
                store.add_rir(stem(&p), to_rate(read_wav(&p)?, sample_rate));
            }
        }
        Ok(store)
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub(crate) fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational-rate conversion of `b` to `rate`.
pub fn to_rate(b: AudioBuffer, rate: u32) -> AudioBuffer {
    if b.sample_rate == rate {
        return b;
    }
    let g = gcd(b.sample_rate as u64, rate as u64);
    let up = (rate as u64 / g) as usize;
    let down = (b.sample_rate as u64 / g) as usize;
    let mut out = resample_by_factor(&b, up, down, &antialias_kernel(up.max(down)));
    out.sample_rate = rate;
    out
}
