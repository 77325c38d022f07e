use std::path::Path;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{read_wav, AudioBuffer};
use crate::autograd::Array;
use crate::degradation::{to_rate, ManifestEntry};
use crate::error::{Error, Result};

/// Aligned `(clean, degraded)` recordings.
#[derive(Clone, Debug)]
pub struct PairDataset {
    pub pairs: Vec<(AudioBuffer, AudioBuffer)>,
}

/// `[B, T]` training arrays.
#[derive(Clone, Debug)]
pub struct Batch {
    pub clean: Array,
    pub degraded: Array,
}

impl PairDataset {
    pub fn new(pairs: Vec<(AudioBuffer, AudioBuffer)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("dataset is empty".into()));
        }
        for (i, (c, d)) in pairs.iter().enumerate() {
            if c.len() != d.len() || c.sample_rate != d.sample_rate || c.is_empty() {
                return Err(Error::InvalidInput(format!("pair {i} is not aligned")));
            }
        }
        Ok(PairDataset { pairs })
    }

    /// Reads a JSON-lines manifest written by the degradation tool.
    pub fn from_manifest(path: &Path, sample_rate: u32) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let e: ManifestEntry = serde_json::from_str(line)?;
            let (Some(cp), Some(dp)) = (&e.clean_path, &e.degraded_path) else {
                return Err(Error::InvalidInput("manifest entry lacks file paths".into()));
            };
            let clean = to_rate(read_wav(base.join(cp))?, sample_rate);
            let degraded = to_rate(read_wav(base.join(dp))?, sample_rate);
            let n = clean.len().min(degraded.len());
            pairs.push((
                AudioBuffer::new(clean.samples[..n].to_vec(), sample_rate)?,
                AudioBuffer::new(degraded.samples[..n].to_vec(), sample_rate)?,
            ));
        }
        PairDataset::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Random items, each cropped at a random offset (or zero-padded) to `segment` samples.
    pub fn sample_batch(&self, batch: usize, segment: usize, rng: &mut ChaCha8Rng) -> Batch {
        let mut clean = Vec::with_capacity(batch * segment);
        let mut degraded = Vec::with_capacity(batch * segment);
        for _ in 0..batch {
            let (c, d) = &self.pairs[rng.gen_range(0..self.pairs.len())];
            let off = if c.len() > segment { rng.gen_range(0..=c.len() - segment) } else { 0 };
            for k in 0..segment {
                clean.push(c.samples.get(off + k).copied().unwrap_or(0.0));
                degraded.push(d.samples.get(off + k).copied().unwrap_or(0.0));
            }
        }
        Batch {
            clean: Array::from_shape_vec(IxDyn(&[batch, segment]), clean).unwrap(),
            degraded: Array::from_shape_vec(IxDyn(&[batch, segment]), degraded).unwrap(),
        }
    }

    /// Every pair in order, trimmed or padded to `segment` samples.
    pub fn full_batch(&self, segment: usize) -> Batch {
        let n = self.pairs.len();
        let mut clean = Array::zeros(IxDyn(&[n, segment]));
        let mut degraded = Array::zeros(IxDyn(&[n, segment]));
        for (i, (c, d)) in self.pairs.iter().enumerate() {
            for k in 0..segment.min(c.len()) {
                clean[[i, k]] = c.samples[k];
                degraded[[i, k]] = d.samples[k];
            }
        }
        Batch { clean, degraded }
    }
}
