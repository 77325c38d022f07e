use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::finetune::{finetune_step, multi_resolution_spectrogram_loss, FinetuneConfig, FinetuneContext, FinetuneLosses};
use super::predictor::{ctc_phoneme_loss, PhonemePredictor, PredictorConfig};
use super::{inject_lora, merge_lora, LoraConfig, LoraReport};
use crate::adversarial::{DiscriminatorBank, LogMel};
use crate::autograd::{Array, Tensor};
use crate::diffusion::{sample_with_grad, sampler_params};
use crate::error::{Error, Result};
use crate::networks::Model;
use crate::nn::{AdamW, Binder, Group, ParamStore};
use crate::synth::{self, SynthConfig};
use crate::trainer::{Batch, ExperimentConfig, PairDataset, Trainer};

/// Fixed-noise evaluation of the two fine-tuning objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneProbe {
    pub ctc: f64,
    pub spectrogram: f64,
}

#[derive(Serialize, Deserialize)]
struct AdapterFile {
    lora: LoraConfig,
    base_step: usize,
    step: usize,
    params: Vec<(String, Array)>,
}

/// A trained model with adapters attached, plus the frozen pieces the
/// fine-tuning losses need.
pub struct FinetuneSession {
    pub config: ExperimentConfig,
    pub model: Model,
    pub store: ParamStore,
    pub bank: DiscriminatorBank,
    pub bank_store: ParamStore,
    pub mel: LogMel,
    pub predictor: PhonemePredictor,
    pub report: LoraReport,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub base_step: usize,
    pub step: usize,
}

impl FinetuneSession {
    /// Injects adapters into the trainer's generator. `use_ema` starts from
    /// the moving-average weights.
    pub fn from_trainer(trainer: &Trainer, predictor: PhonemePredictor, use_ema: bool, seed: u64) -> Result<Self> {
        let config = trainer.config.clone();
        let mut model = trainer.model.clone();
        let mut store = if use_ema { trainer.ema_store()? } else { trainer.store.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let report = inject_lora(&mut model, &mut store, &mut rng, &config.lora)?;
        let mel = LogMel::new(&config.mel, config.architecture.sample_rate)?;
        Ok(FinetuneSession {
            model,
            store,
            bank: trainer.bank.clone(),
            bank_store: trainer.disc_store.clone(),
            mel,
            predictor,
            report,
            opt: AdamW::new(config.train.beta1, config.train.beta2, 0.0),
            rng,
            base_step: trainer.step,
            step: 0,
            config,
        })
    }

    pub fn from_checkpoint(path: &Path, predictor: PhonemePredictor, use_ema: bool, seed: u64) -> Result<Self> {
        let trainer = Trainer::load(path, None)?;
        FinetuneSession::from_trainer(&trainer, predictor, use_ema, seed)
    }

    fn context(&self) -> FinetuneContext<'_> {
        FinetuneContext {
            model: &self.model,
            bank: &self.bank,
            bank_store: &self.bank_store,
            mel: &self.mel,
            predictor: &self.predictor,
        }
    }

    pub fn step(&mut self, batch: &Batch) -> Result<FinetuneLosses> {
        let degraded = Tensor::constant(batch.degraded.clone());
        let clean = Tensor::constant(batch.clean.clone());
        let ctx = FinetuneContext {
            model: &self.model,
            bank: &self.bank,
            bank_store: &self.bank_store,
            mel: &self.mel,
            predictor: &self.predictor,
        };
        let losses = finetune_step(
            &ctx,
            &mut self.store,
            &degraded,
            &clean,
            &self.config.finetune,
            &mut self.opt,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(losses)
    }

    /// `steps` updates on random crops, logging `step\tname\tvalue` lines.
    pub fn run(
        &mut self,
        data: &PairDataset,
        steps: usize,
        batch: usize,
        segment: usize,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<FinetuneLosses>> {
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let b = data.sample_batch(batch, segment, &mut self.rng);
            let l = self.step(&b)?;
            if let Some(w) = log.as_deref_mut() {
                for (name, v) in [("ctc", l.ctc), ("head", l.head), ("spectrogram", l.spectrogram), ("total", l.total)] {
                    writeln!(w, "{}\t{name}\t{v:e}", self.step)?;
                }
            }
            history.push(l);
        }
        Ok(history)
    }

    /// CTC and spectrogram losses of the current weights with sampler noise
    /// drawn from `seed`, so successive probes are comparable.
    pub fn probe(&self, batch: &Batch, seed: u64) -> Result<FinetuneProbe> {
        let cfg: &FinetuneConfig = &self.config.finetune;
        let ctx = self.context();
        let sampler = sampler_params(&ctx.model.schedule, cfg.sampler_steps, cfg.epsilon)?;
        let clean = Tensor::constant(batch.clean.clone());
        let degraded = Tensor::constant(batch.degraded.clone());
        let (b, t) = (clean.shape()[0], clean.shape()[1]);
        let bind = Binder::frozen(&self.store);
        let cond = ctx.model.condition(&bind, &degraded)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enhanced = sample_with_grad(ctx.model, &bind, &cond.features, (b, t), &sampler, &mut rng, 0)?;
        Ok(FinetuneProbe {
            ctc: ctc_phoneme_loss(&enhanced, &clean, ctx.predictor)?.item(),
            spectrogram: multi_resolution_spectrogram_loss(&clean, &enhanced, &cfg.resolutions)?.item(),
        })
    }

    /// Writes only the adapter factors.
    pub fn save_adapters(&self, path: &Path) -> Result<()> {
        let params = self
            .store
            .iter()
            .filter(|(_, p)| p.group == Group::Lora)
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        let file = AdapterFile {
            lora: self.config.lora.clone(),
            base_step: self.base_step,
            step: self.step,
            params,
        };
        bincode::serialize_into(BufWriter::new(File::create(path)?), &file)?;
        Ok(())
    }

    /// Folds the adapters into the base weights.
    pub fn merged(mut self) -> Result<(Model, ParamStore, ExperimentConfig)> {
        merge_lora(&mut self.model, &mut self.store)?;
        Ok((self.model, self.store, self.config))
    }
}

/// Attaches adapters saved by [`FinetuneSession::save_adapters`] to a base
/// model and store.
pub fn load_adapters(model: &mut Model, store: &mut ParamStore, path: &Path) -> Result<LoraReport> {
    let file: AdapterFile = bincode::deserialize_from(BufReader::new(File::open(path)?))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let report = inject_lora(model, store, &mut rng, &file.lora)?;
    let expected = store.ids_in(&[Group::Lora]).len();
    if expected != file.params.len() {
        return Err(Error::Lora(format!(
            "adapter file holds {} factors, model expects {expected}",
            file.params.len()
        )));
    }
    for (name, value) in file.params {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Lora(format!("adapter {name} has no matching layer")))?;
        if store.param(id).shape != value.shape() {
            return Err(Error::Lora(format!("adapter {name} has shape {:?}", value.shape())));
        }
        store.set(id, value);
    }
    Ok(report)
}

/// Trains a phoneme predictor on `count` synthetic utterances of `len`
/// samples. Returns the predictor and its per-step training loss.
pub fn train_synthetic_predictor(
    cfg: &PredictorConfig,
    count: usize,
    len: usize,
    steps: usize,
    seed: u64,
) -> Result<(PhonemePredictor, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synth_cfg = SynthConfig {
        sample_rate: cfg.sample_rate,
        ..SynthConfig::default()
    };
    let data: Vec<_> = (0..count).map(|_| synth::utterance(&mut rng, &synth_cfg, len)).collect();
    let mut predictor = PhonemePredictor::new(cfg, seed)?;
    let history = predictor.train(&data, steps, count.min(8), 3e-3, &mut rng)?;
    Ok((predictor, history))
}
