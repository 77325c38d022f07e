use serde::{Deserialize, Serialize};

use crate::adversarial::{DiscriminatorConfig, LossWeights};
use crate::audio::SpectralConfig;
use crate::degradation::DegradationConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::lora::{FinetuneConfig, LoraConfig, PredictorConfig};
use crate::networks::ArchitectureConfig;

/// Which auxiliary objective trains the conditioning network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Discriminators, feature matching and mel loss on the waveform head.
    Adversarial,
    /// Mixture-density losses only.
    Mdn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub decay_start: usize,
    pub decay_end: usize,
    pub lr_min: f64,
    pub lr_peak: f64,
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub ema_decay: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            warmup_steps: 100,
            decay_start: 1000,
            decay_end: 2000,
            lr_min: 1e-6,
            lr_peak: 1e-3,
            batch_size: 4,
            segment_seconds: 1.0,
            ema_decay: 0.999,
            loss_mode: LossMode::Adversarial,
            seed: 0,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.01,
            clip_norm: 10.0,
            checkpoint_every: 500,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_steps <= self.decay_start && self.decay_start <= self.decay_end && self.decay_end <= self.total_steps) {
            return Err(Error::Config(format!(
                "need warmup ({}) <= decay_start ({}) <= decay_end ({}) <= total ({})",
                self.warmup_steps, self.decay_start, self.decay_end, self.total_steps
            )));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_peak) {
            return Err(Error::Config("need 0 < lr_min < lr_peak".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema decay must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || !(self.segment_seconds > 0.0) {
            return Err(Error::Config("batch size and segment length must be positive".into()));
        }
        Ok(())
    }
}

/// Enhancement-time sampler settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub steps: usize,
    pub epsilon: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings { steps: 8, epsilon: 1.3 }
    }
}

/// Everything an experiment needs, as one hierarchical document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub losses: LossWeights,
    /// Spectral settings of the waveform-head mel loss.
    #[serde(default)]
    pub mel: SpectralConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub degradation: DegradationConfig,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
}

pub const DESK_PRESET: &str = include_str!("../../presets/desk.toml");
pub const PAPER_PRESET: &str = include_str!("../../presets/paper.toml");

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig::from_toml(DESK_PRESET).expect("bundled desk preset parses")
    }

    pub fn paper() -> Self {
        ExperimentConfig::from_toml(PAPER_PRESET).expect("bundled paper preset parses")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ExperimentConfig::desk()),
            "paper" => Ok(ExperimentConfig::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, paper)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        ExperimentConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.schedule.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        self.lora.validate()?;
        self.mel.validate(self.architecture.sample_rate)?;
        if self.degradation.sample_rate != self.architecture.sample_rate {
            return Err(Error::Config("degradation and model sample rates differ".into()));
        }
        let seg = self.segment_samples();
        if seg == 0 {
            return Err(Error::Config("segment shorter than one bottleneck frame".into()));
        }
        Ok(())
    }

    /// Training segment length rounded down to the bottleneck hop.
    pub fn segment_samples(&self) -> usize {
        let hop = self.architecture.hop();
        let raw = (self.train.segment_seconds * self.architecture.sample_rate as f64).round() as usize;
        raw / hop * hop
    }
}
