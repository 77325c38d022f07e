//! Low-rank adaptation of a trained model and the phoneme-fidelity
//! fine-tuning stage built on it.

mod ctc;
mod finetune;
mod predictor;
mod session;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ctc::{collapse, ctc_loss, ctc_nll, greedy_decode};
pub use finetune::{finetune_step, multi_resolution_spectrogram_loss, FinetuneConfig, FinetuneContext, FinetuneLosses};
pub use predictor::{ctc_phoneme_loss, PhonemePredictor, PredictorConfig};
pub use session::{load_adapters, train_synthetic_predictor, FinetuneProbe, FinetuneSession};

use crate::autograd::Array;
use crate::error::{Error, Result};
use crate::networks::Model;
use crate::nn::{Group, LoraPair, LoraTarget, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    /// The update is scaled by `alpha / rank`.
    pub alpha: f64,
    /// Layers with either dimension below this are left alone; defaults to the rank.
    pub min_dim: Option<usize>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 1.0,
            min_dim: None,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn threshold(&self) -> usize {
        self.min_dim.unwrap_or(self.rank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        if !(self.alpha.is_finite()) {
            return Err(Error::Config("adapter alpha must be finite".into()));
        }
        Ok(())
    }
}

/// Outcome of an injection pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoraReport {
    /// `(layer, (out, in))` of every adapted layer.
    pub adapted: Vec<(String, (usize, usize))>,
    pub skipped: Vec<String>,
    pub trainable: usize,
}

/// Attaches `B = 0`, `A ~ U(±1/√in)` to one layer when it is large enough.
/// Returns the number of added parameters, or `None` if the layer was skipped.
pub fn attach_adapter(
    target: &mut dyn LoraTarget,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &LoraConfig,
) -> Result<Option<usize>> {
    cfg.validate()?;
    let (out, inp) = target.dims();
    if out.min(inp) < cfg.threshold() {
        return Ok(None);
    }
    if target.lora().is_some() {
        return Err(Error::Lora(format!("{} already carries an adapter", target.target_name())));
    }
    let r = cfg.rank;
    let name = target.target_name().to_string();
    let bound = 1.0 / (inp as f64).sqrt();
    let a = store.add(format!("lora.{name}.a"), Group::Lora, &[r, inp], || {
        let data = (0..r * inp).map(|_| rng.gen_range(-bound..=bound)).collect();
        Array::from_shape_vec(IxDyn(&[r, inp]), data).unwrap()
    });
    let b = store.add(format!("lora.{name}.b"), Group::Lora, &[out, r], || Array::zeros(IxDyn(&[out, r])));
    *target.lora_mut() = Some(LoraPair {
        a,
        b,
        rank: r,
        scaling: cfg.scaling(),
        merged: false,
    });
    Ok(Some(r * (inp + out)))
}

/// Adapts every eligible layer of both networks.
pub fn inject_lora(model: &mut Model, store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &LoraConfig) -> Result<LoraReport> {
    cfg.validate()?;
    let mut report = LoraReport::default();
    let mut err = None;
    model.visit_lora_targets(&mut |t| {
        if err.is_some() {
            return;
        }
        match attach_adapter(t, store, rng, cfg) {
            Ok(Some(n)) => {
                report.adapted.push((t.target_name().to_string(), t.dims()));
                report.trainable += n;
            }
            Ok(None) => report.skipped.push(t.target_name().to_string()),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Folds every adapter into its base weights. Returns the number merged.
pub fn merge_lora(model: &mut Model, store: &mut ParamStore) -> Result<usize> {
    let mut merged = 0;
    let mut err = None;
    model.visit_lora_targets(&mut |t| {
        if err.is_some() || t.lora().is_none() {
            return;
        }
        match t.merge(store) {
            Ok(()) => merged += 1,
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None if merged == 0 => Err(Error::Lora("model has no adapters to merge".into())),
        None => Ok(merged),
    }
}
