//! Conditioning network, score network and auxiliary heads.

mod blocks;
mod conditioning;
mod score;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{antialiased_down, antialiased_up, film, fourier_embed, Film, FourierEmbedding, ResBlock};
pub use conditioning::{
    Adapter, ConditioningFeatures, ConditioningNet, ConditioningOutput, DecoderStage, EncoderStage,
};
pub use score::{ScoreDecoderStage, ScoreEncoderStage, ScoreNet};

use crate::audio::{antialias_kernel, FilterKernel};
use crate::autograd::{Array, Tensor};
use crate::diffusion::{precondition_coeffs, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Binder, Builder, Group, LoraTarget, ParamStore, WnConv1d};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureConfig {
    pub sample_rate: u32,
    /// Rate-change factors listed from the bottleneck outwards.
    pub rate_factors: Vec<usize>,
    pub base_channels: usize,
    pub max_channels: usize,
    pub kernel_size: usize,
    /// Kernel of the width-changing convolutions at the low rate in the score network.
    pub rate_kernel: usize,
    pub gru_layers_cond: usize,
    pub gru_layers_score: usize,
    pub embedding_pairs: usize,
    pub mdn_components: usize,
    pub mel_bins: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig::desk()
    }
}

impl ArchitectureConfig {
    /// Small configuration that trains on one CPU core.
    pub fn desk() -> Self {
        ArchitectureConfig {
            sample_rate: 8000,
            rate_factors: vec![2, 3, 5, 8],
            base_channels: 8,
            max_channels: 512,
            kernel_size: 3,
            rate_kernel: 5,
            gru_layers_cond: 2,
            gru_layers_score: 1,
            embedding_pairs: 16,
            mdn_components: 3,
            mel_bins: 40,
        }
    }

    /// Full-size configuration at 24 kHz.
    pub fn paper() -> Self {
        ArchitectureConfig {
            sample_rate: 24000,
            base_channels: 48,
            embedding_pairs: 128,
            mel_bins: 80,
            ..ArchitectureConfig::desk()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels)
    }

    /// Total down-sampling between waveform and bottleneck.
    pub fn hop(&self) -> usize {
        self.rate_factors.iter().product()
    }

    /// Factors in the order the encoders apply them.
    pub fn encoder_factors(&self) -> Vec<usize> {
        self.rate_factors.iter().rev().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate_factors.len() != 4 {
            return Err(Error::Config("exactly four rate factors are required".into()));
        }
        if self.rate_factors.iter().any(|&f| f < 2) {
            return Err(Error::Config("rate factors must be at least 2".into()));
        }
        if self.base_channels == 0 || self.kernel_size % 2 == 0 || self.rate_kernel % 2 == 0 {
            return Err(Error::Config("channels must be positive and kernels odd".into()));
        }
        if self.embedding_pairs == 0 || self.mdn_components == 0 || self.mel_bins == 0 {
            return Err(Error::Config("embedding, mixture and mel sizes must be positive".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(())
    }
}

thread_local! {
    static KERNELS: RefCell<HashMap<usize, Rc<FilterKernel>>> = RefCell::new(HashMap::new());
}

/// Cached anti-aliasing kernel for a rate factor.
pub fn kernel_for(factor: usize) -> Rc<FilterKernel> {
    KERNELS.with(|k| {
        k.borrow_mut()
            .entry(factor)
            .or_insert_with(|| Rc::new(antialias_kernel(factor)))
            .clone()
    })
}

/// Mixture-density heads used only as an auxiliary training signal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdnHeads {
    /// Bottleneck → per-frame log-mel mixture `K (1 + 2 mels)`.
    pub mel: WnConv1d,
    /// Conditioning decoder output → per-sample mean and log-variance.
    pub wave: WnConv1d,
    pub components: usize,
    pub mel_bins: usize,
}

/// Mixture parameters for `[B, frames]` log-mel frames.
pub struct MelMixture {
    /// `[B, K, F]`
    pub logits: Tensor,
    /// `[B, K, mels, F]`
    pub means: Tensor,
    /// `[B, K, mels, F]`
    pub logvars: Tensor,
}

impl MdnHeads {
    pub fn new(b: &mut Builder, cfg: &ArchitectureConfig) -> Self {
        let k = cfg.mdn_components;
        MdnHeads {
            mel: b.conv1d("mel", cfg.channels(4), k * (1 + 2 * cfg.mel_bins), 1, 1, (0, 0)),
            wave: b.conv1d("wave", cfg.channels(0), 2, 1, 1, (0, 0)),
            components: k,
            mel_bins: cfg.mel_bins,
        }
    }

    pub fn mel_mixture(&self, bind: &Binder, bottleneck: &Tensor) -> MelMixture {
        let out = self.mel.forward(bind, bottleneck);
        let (b, frames) = (out.shape()[0], out.shape()[2]);
        let (k, m) = (self.components, self.mel_bins);
        MelMixture {
            logits: out.narrow(1, 0, k),
            means: out.narrow(1, k, k * m).reshape(&[b, k, m, frames]),
            logvars: out.narrow(1, k + k * m, k * m).reshape(&[b, k, m, frames]),
        }
    }

    /// `(mean, logvar)`, each `[B, T]`.
    pub fn wave_gaussian(&self, bind: &Binder, decoder_out: &Tensor) -> (Tensor, Tensor) {
        let out = self.wave.forward(bind, decoder_out);
        let (b, t) = (out.shape()[0], out.shape()[2]);
        (out.narrow(1, 0, 1).reshape(&[b, t]), out.narrow(1, 1, 1).reshape(&[b, t]))
    }
}

/// `D = c_skip x + c_out F` with per-item coefficients. `x`, `raw`: `[B, T]`.
pub fn precondition_output(x: &Tensor, raw: &Tensor, sigmas: &[f64], sigma_data: f64) -> Tensor {
    let b = sigmas.len();
    let coeffs: Vec<_> = sigmas.iter().map(|&s| precondition_coeffs(s, sigma_data)).collect();
    let skip = Tensor::from_vec(&[b, 1], coeffs.iter().map(|c| c.c_skip).collect());
    let out = Tensor::from_vec(&[b, 1], coeffs.iter().map(|c| c.c_out).collect());
    x.mul(&skip).add(&raw.mul(&out))
}

/// Parameter counts per sub-network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCensus {
    pub conditioning: usize,
    pub score: usize,
    pub mdn: usize,
}

impl ParameterCensus {
    /// Parameters used at inference (auxiliary heads excluded).
    pub fn inference(&self) -> usize {
        self.conditioning + self.score
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub config: ArchitectureConfig,
    pub schedule: NoiseSchedule,
    pub conditioning: ConditioningNet,
    pub score: ScoreNet,
    pub mdn: MdnHeads,
}

impl Model {
    /// Registers every parameter in `store` and returns the layer graph.
    pub fn build(
        config: &ArchitectureConfig,
        schedule: &NoiseSchedule,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Model> {
        config.validate()?;
        schedule.validate()?;
        let conditioning = ConditioningNet::new(&mut Builder::new(store, rng, Group::Conditioning, "cond"), config);
        let score = ScoreNet::new(
            &mut Builder::new(store, rng, Group::Score, "score"),
            config,
            schedule.sigma_min,
            schedule.sigma_max,
        );
        let mdn = MdnHeads::new(&mut Builder::new(store, rng, Group::Mdn, "mdn"), config);
        Ok(Model {
            config: config.clone(),
            schedule: schedule.clone(),
            conditioning,
            score,
            mdn,
        })
    }

    /// Builds a shape-only store and counts parameters.
    pub fn census(config: &ArchitectureConfig) -> Result<ParameterCensus> {
        use rand::SeedableRng;
        let mut store = ParamStore::shape_only();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Model::build(config, &NoiseSchedule::default(), &mut store, &mut rng)?;
        Ok(ParameterCensus {
            conditioning: store.count(&[Group::Conditioning]),
            score: store.count(&[Group::Score]),
            mdn: store.count(&[Group::Mdn]),
        })
    }

    pub fn hop(&self) -> usize {
        self.config.hop()
    }

    fn check_len(&self, x: &Tensor) -> Result<(usize, usize)> {
        if x.ndim() != 2 {
            return Err(Error::Shape(format!("expected [batch, samples], got {:?}", x.shape())));
        }
        let (b, t) = (x.shape()[0], x.shape()[1]);
        if t == 0 || t % self.hop() != 0 {
            return Err(Error::InvalidInput(format!(
                "signal length {t} is not a positive multiple of {}",
                self.hop()
            )));
        }
        Ok((b, t))
    }

    /// Runs the conditioning network on `y: [B, T]`.
    pub fn condition(&self, bind: &Binder, y: &Tensor) -> Result<ConditioningOutput> {
        let (b, t) = self.check_len(y)?;
        Ok(self.conditioning.forward(bind, &y.reshape(&[b, 1, t])))
    }

    /// Denoiser `D(x; σ)` for `x: [B, T]`.
    pub fn denoise(&self, bind: &Binder, x: &Tensor, cond: &ConditioningFeatures, sigmas: &[f64]) -> Result<Tensor> {
        let (b, t) = self.check_len(x)?;
        if sigmas.len() != b {
            return Err(Error::Shape(format!("{} noise levels for batch {b}", sigmas.len())));
        }
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Domain(format!("noise level {s} must be positive")));
        }
        let sd = self.schedule.sigma_data;
        let c_in = Tensor::from_vec(&[b, 1], sigmas.iter().map(|&s| precondition_coeffs(s, sd).c_in).collect());
        let x_in = x.mul(&c_in).reshape(&[b, 1, t]);
        let raw = self.score.forward(bind, &x_in, cond, sigmas).reshape(&[b, t]);
        Ok(precondition_output(x, &raw, sigmas, sd))
    }

    /// Score estimate `(D(x; σ) - x) / σ²`.
    pub fn score(&self, bind: &Binder, x: &Tensor, cond: &ConditioningFeatures, sigmas: &[f64]) -> Result<Tensor> {
        let d = self.denoise(bind, x, cond, sigmas)?;
        let inv = Tensor::from_vec(&[sigmas.len(), 1], sigmas.iter().map(|s| 1.0 / (s * s)).collect());
        Ok(d.sub(x).mul(&inv))
    }

    /// Visits every layer eligible for low-rank adaptation, in a fixed order.
    pub fn visit_lora_targets(&mut self, f: &mut dyn FnMut(&mut dyn LoraTarget)) {
        self.conditioning.visit_lora_targets(f);
        self.score.visit_lora_targets(f);
    }
}

/// Utility used by tests and tooling: an `[B, T]` tensor from rows.
pub fn batch_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let t = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != t) {
        return Err(Error::Shape("rows differ in length".into()));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::constant(Array::from_shape_vec(ndarray::IxDyn(&[rows.len(), t]), data).unwrap()))
}
