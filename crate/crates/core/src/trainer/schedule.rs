use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autograd::Array;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

/// Linear warm-up from `lr_min` to `lr_peak`, a plateau, then a cosine
/// return to `lr_min` between `decay_start` and `decay_end`.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    let (lo, hi) = (cfg.lr_min, cfg.lr_peak);
    if step < cfg.warmup_steps {
        lo + (hi - lo) * step as f64 / cfg.warmup_steps as f64
    } else if step <= cfg.decay_start {
        hi
    } else if step < cfg.decay_end {
        let frac = (step - cfg.decay_start) as f64 / (cfg.decay_end - cfg.decay_start) as f64;
        lo + (hi - lo) * 0.5 * (1.0 + (PI * frac).cos())
    } else {
        lo
    }
}

/// Exponential moving average of a subset of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub decay: f64,
    pub updates: u64,
    pub shadow: BTreeMap<ParamId, Array>,
}

impl EmaState {
    /// Shadow initialised to the current values of `ids`.
    pub fn new(store: &ParamStore, ids: &[ParamId], decay: f64) -> Self {
        EmaState {
            decay,
            updates: 0,
            shadow: ids.iter().map(|&id| (id, store.value(id).clone())).collect(),
        }
    }

    /// `shadow ← decay·shadow + (1 − decay)·current`.
    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        for (&id, sh) in self.shadow.iter_mut() {
            let cur = store.value(id);
            if cur.shape() != sh.shape() {
                return Err(Error::Shape(format!(
                    "EMA shadow of {} has shape {:?}, weights have {:?}",
                    store.param(id).name,
                    sh.shape(),
                    cur.shape()
                )));
            }
            let d = self.decay;
            sh.zip_mut_with(cur, |s, &c| *s = d * *s + (1.0 - d) * c);
        }
        self.updates += 1;
        Ok(())
    }

    /// Overwrites the tracked parameters of `store` with the shadow.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        for (&id, sh) in &self.shadow {
            if id.0 >= store.len() || store.value(id).shape() != sh.shape() {
                return Err(Error::Shape(format!("EMA shadow does not fit parameter {}", id.0)));
            }
            store.set(id, sh.clone());
        }
        Ok(())
    }
}
