//! Main-stage training: schedules, EMA, the two-optimizer step and checkpoints.

mod checkpoint;
mod config;
mod data;
mod schedule;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_diff, load_for_inference, read_manifest, save_model, CheckpointManifest, CHECKPOINT_FORMAT};
pub use config::{ExperimentConfig, LossMode, SamplerSettings, TrainConfig, DESK_PRESET, PAPER_PRESET};
pub use data::{Batch, PairDataset};
pub use schedule::{lr_at_step, EmaState};

use crate::adversarial::{
    discriminator_loss, generator_feature_loss, mel_mixture_loss, waveform_gaussian_loss, DiscriminatorBank, LogMel,
};
use crate::audio::SpectralConfig;
use crate::autograd::{Array, Tensor};
use crate::diffusion::{draw_loss_noise, score_matching_loss};
use crate::error::{Error, Result};
use crate::networks::Model;
use crate::nn::{clip_grad_norm, AdamW, Binder, Builder, Group, ParamId, ParamStore};

/// Scalars produced by one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub losses: Vec<(String, f64)>,
    pub skipped_generator: bool,
    pub skipped_discriminator: bool,
}

impl StepRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.losses.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Tab-separated `step  name  value` lines.
    pub fn write_tsv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "{}\tlr\t{:e}", self.step, self.lr)?;
        for (name, v) in &self.losses {
            writeln!(w, "{}\t{}\t{}", self.step, name, v)?;
        }
        Ok(())
    }
}

/// Log-mel frames at the bottleneck rate, used as mixture targets.
fn bottleneck_mel(cfg: &ExperimentConfig) -> Result<LogMel> {
    let hop = cfg.architecture.hop();
    let spec = SpectralConfig {
        window_length: 2 * hop,
        hop_length: hop,
        fft_size: (2 * hop).next_power_of_two(),
        mel_bins: cfg.architecture.mel_bins,
        ..SpectralConfig::default()
    };
    LogMel::new(&spec, cfg.architecture.sample_rate)
}

fn all_finite(grads: &[(ParamId, Array)]) -> bool {
    grads.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: Model,
    /// Conditioning, score and mixture-head parameters.
    pub store: ParamStore,
    pub bank: DiscriminatorBank,
    pub disc_store: ParamStore,
    pub g_opt: AdamW,
    pub d_opt: AdamW,
    pub ema: EmaState,
    pub rng: ChaCha8Rng,
    pub step: usize,
    head_mel: LogMel,
    target_mel: LogMel,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut store = ParamStore::new();
        let model = Model::build(&config.architecture, &config.schedule, &mut store, &mut rng)?;
        let mut disc_store = ParamStore::new();
        let bank = DiscriminatorBank::new(
            &mut Builder::new(&mut disc_store, &mut rng, Group::Discriminator, "disc"),
            &config.discriminator,
        )?;
        let ema = EmaState::new(&store, &store.ids_in(&Group::GENERATOR), config.train.ema_decay);
        Trainer::assemble(config, model, store, bank, disc_store, ema, rng)
    }

    fn assemble(
        config: ExperimentConfig,
        model: Model,
        store: ParamStore,
        bank: DiscriminatorBank,
        disc_store: ParamStore,
        ema: EmaState,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let t = &config.train;
        let (g_opt, d_opt) = (
            AdamW::new(t.beta1, t.beta2, t.weight_decay),
            AdamW::new(t.beta1, t.beta2, t.weight_decay),
        );
        let head_mel = LogMel::new(&config.mel, config.architecture.sample_rate)?;
        let target_mel = bottleneck_mel(&config)?;
        Ok(Trainer {
            config,
            model,
            store,
            bank,
            disc_store,
            g_opt,
            d_opt,
            ema,
            rng,
            step: 0,
            head_mel,
            target_mel,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_at_step(self.step, &self.config.train)
    }

    /// One discriminator update (adversarial mode) followed by one generator
    /// update and an EMA update. Steps with non-finite gradients are skipped.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let lr = self.lr();
        let shape = batch.clean.shape().to_vec();
        if shape.len() != 2 || batch.degraded.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "batch arrays {:?} and {:?} must both be [B, T]",
                shape,
                batch.degraded.shape()
            )));
        }
        let clean = Tensor::constant(batch.clean.clone());
        let degraded = Tensor::constant(batch.degraded.clone());
        let noise = draw_loss_noise(shape[0], shape[1], &self.config.schedule, &mut self.rng);
        let mode = self.config.train.loss_mode;
        let clip = self.config.train.clip_norm;
        let mut losses = Vec::new();

        let bind = Binder::new(&self.store, &Group::GENERATOR);
        let cond = self.model.condition(&bind, &degraded)?;

        let mut skipped_discriminator = false;
        if mode == LossMode::Adversarial {
            let dbind = Binder::new(&self.disc_store, &[Group::Discriminator]);
            let d_loss = discriminator_loss(&dbind, &self.bank, &clean, &cond.head);
            let mut grads = dbind.gradients(&d_loss.backward());
            drop(dbind);
            losses.push(("d_loss".to_string(), d_loss.item()));
            if d_loss.item().is_finite() && all_finite(&grads) {
                clip_grad_norm(&mut grads, clip);
                self.d_opt.step(&mut self.disc_store, &grads, lr);
            } else {
                skipped_discriminator = true;
                log::warn!("step {}: non-finite discriminator loss, update skipped", self.step);
            }
        }

        let model = &self.model;
        let features = &cond.features;
        let score = score_matching_loss(&clean, &noise, |x, s| {
            model.score(&bind, x, features, s).expect("batch shape checked by conditioning")
        });
        losses.push(("score".to_string(), score.item()));
        let aux = match mode {
            LossMode::Adversarial => {
                let dbind = Binder::frozen(&self.disc_store);
                let g = generator_feature_loss(&dbind, &self.bank, &clean, &cond.head, &self.head_mel, &self.config.losses)?;
                losses.extend(g.itemized().into_iter().map(|(n, v)| (n.to_string(), v)));
                g.total
            }
            LossMode::Mdn => {
                let target = self.target_mel.forward(&clean);
                let frames = cond.features.bottleneck.shape()[2];
                let target = target.narrow(1, 0, frames);
                let mix = self.model.mdn.mel_mixture(&bind, &cond.features.bottleneck);
                let mel_nll = mel_mixture_loss(&mix, &target)?;
                let (mean, logvar) = self.model.mdn.wave_gaussian(&bind, &cond.decoder_out);
                let wave_nll = waveform_gaussian_loss(&mean, &logvar, &clean)?;
                losses.push(("mdn_mel".to_string(), mel_nll.item()));
                losses.push(("mdn_wave".to_string(), wave_nll.item()));
                mel_nll.add(&wave_nll)
            }
        };
        let total = score.add(&aux);
        losses.push(("generator_total".to_string(), total.item()));
        let mut grads = bind.gradients(&total.backward());
        drop(bind);

        let skipped_generator = !(total.item().is_finite() && all_finite(&grads));
        if skipped_generator {
            log::warn!("step {}: non-finite generator loss, update skipped", self.step);
        } else {
            let norm = clip_grad_norm(&mut grads, clip);
            losses.push(("grad_norm".to_string(), norm));
            self.g_opt.step(&mut self.store, &grads, lr);
            self.ema.update(&self.store)?;
        }
        let record = StepRecord {
            step: self.step,
            lr,
            losses,
            skipped_generator,
            skipped_discriminator,
        };
        self.step += 1;
        Ok(record)
    }

    /// Runs `steps` updates on random batches. Every `log_every` steps the
    /// record is appended to `log`; every `checkpoint_every` steps a
    /// checkpoint is written to `checkpoint_dir`.
    pub fn run(
        &mut self,
        data: &PairDataset,
        steps: usize,
        log: Option<&mut dyn Write>,
        checkpoint_dir: Option<&std::path::Path>,
    ) -> Result<Vec<StepRecord>> {
        let seg = self.config.segment_samples();
        let batch_size = self.config.train.batch_size;
        let (log_every, ckpt_every) = (self.config.train.log_every.max(1), self.config.train.checkpoint_every);
        let mut log = log;
        let mut records = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = data.sample_batch(batch_size, seg, &mut self.rng);
            let rec = self.train_step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                if rec.step % log_every == 0 {
                    rec.write_tsv(w)?;
                }
            }
            records.push(rec);
            if let Some(dir) = checkpoint_dir {
                if ckpt_every > 0 && self.step % ckpt_every == 0 {
                    self.save(dir)?;
                }
            }
        }
        Ok(records)
    }

    /// Generator store with the EMA shadow written in.
    pub fn ema_store(&self) -> Result<ParamStore> {
        let mut s = self.store.clone();
        self.ema.apply_to(&mut s)?;
        Ok(s)
    }
}
