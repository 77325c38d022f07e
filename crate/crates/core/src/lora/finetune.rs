use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::predictor::{ctc_phoneme_loss, PhonemePredictor};
use crate::adversarial::{generator_feature_loss, DiscriminatorBank, LogMel, LossWeights};
use crate::audio::{window_values, Window};
use crate::autograd::Tensor;
use crate::diffusion::{sample_with_grad, sampler_params};
use crate::error::{Error, Result};
use crate::networks::Model;
use crate::nn::{clip_grad_norm, grad_norm, AdamW, Binder, Group, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub sampler_steps: usize,
    pub epsilon: f64,
    /// Sampler updates that keep their graph.
    pub grad_steps: usize,
    pub lr: f64,
    pub lambda_ctc: f64,
    pub lambda_spectrogram: f64,
    pub head_weights: LossWeights,
    /// `(fft_size, hop_length, window_length)`
    pub resolutions: Vec<(usize, usize, usize)>,
    pub clip_norm: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            sampler_steps: 8,
            epsilon: 1.3,
            grad_steps: 2,
            lr: 1e-5,
            lambda_ctc: 1.0,
            lambda_spectrogram: 1.0,
            head_weights: LossWeights::default(),
            resolutions: vec![(1024, 256, 1024), (2048, 512, 2048), (512, 128, 512)],
            clip_norm: 10.0,
        }
    }
}

/// Frozen pieces the fine-tuning loss depends on.
pub struct FinetuneContext<'a> {
    pub model: &'a Model,
    pub bank: &'a DiscriminatorBank,
    /// Weights of `bank`, kept apart from the adapted store.
    pub bank_store: &'a ParamStore,
    pub mel: &'a LogMel,
    pub predictor: &'a PhonemePredictor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLosses {
    pub ctc: f64,
    pub head: f64,
    pub spectrogram: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Set when the update was dropped because of a non-finite gradient.
    pub skipped: bool,
}

/// Sum over resolutions of mean |log|S| − log|Ŝ|| plus spectral convergence
/// `‖|S| − |Ŝ|‖ / ‖|S|‖`. Both signals `[B, T]`.
pub fn multi_resolution_spectrogram_loss(
    reference: &Tensor,
    estimate: &Tensor,
    resolutions: &[(usize, usize, usize)],
) -> Result<Tensor> {
    if reference.shape() != estimate.shape() {
        return Err(Error::InvalidInput("spectrogram loss needs equal shapes".into()));
    }
    let mut total = Tensor::scalar(0.0);
    for &(fft, hop, win) in resolutions {
        if win > fft || hop == 0 {
            return Err(Error::Config(format!("bad resolution ({fft}, {hop}, {win})")));
        }
        let mut window = vec![0.0; fft];
        let off = (fft - win) / 2;
        window[off..off + win].copy_from_slice(&window_values(Window::Hann, win));
        let r = reference.stft_magnitude(fft, hop, &window);
        let e = estimate.stft_magnitude(fft, hop, &window);
        let log_term = r.ln().sub(&e.ln()).abs().mean();
        let sc = r.sub(&e).sum_squares().sqrt().div(&r.sum_squares().sqrt());
        total = total.add(&log_term).add(&sc);
    }
    Ok(total)
}

/// One adapter update on `(degraded, clean)` batches `[B, T]`.
///
/// Only [`Group::Lora`] parameters are trainable; everything else in `store`
/// stays fixed.
pub fn finetune_step(
    ctx: &FinetuneContext,
    store: &mut ParamStore,
    degraded: &Tensor,
    clean: &Tensor,
    cfg: &FinetuneConfig,
    opt: &mut AdamW,
    rng: &mut ChaCha8Rng,
) -> Result<FinetuneLosses> {
    if degraded.shape() != clean.shape() || degraded.ndim() != 2 {
        return Err(Error::InvalidInput("degraded and clean batches must match".into()));
    }
    let sampler = sampler_params(&ctx.model.schedule, cfg.sampler_steps, cfg.epsilon)?;
    let (b, t) = (clean.shape()[0], clean.shape()[1]);
    let (grads, losses) = {
        let bind = Binder::new(store, &[Group::Lora]);
        let cond = ctx.model.condition(&bind, degraded)?;
        let enhanced = sample_with_grad(ctx.model, &bind, &cond.features, (b, t), &sampler, rng, cfg.grad_steps)?;
        let ctc = ctc_phoneme_loss(&enhanced, clean, ctx.predictor)?;
        let frozen_bank = Binder::frozen(ctx.bank_store);
        let head = generator_feature_loss(&frozen_bank, ctx.bank, clean, &cond.head, ctx.mel, &cfg.head_weights)?.total;
        let spec = multi_resolution_spectrogram_loss(clean, &enhanced, &cfg.resolutions)?;
        let total = ctc
            .scale(cfg.lambda_ctc)
            .add(&head)
            .add(&spec.scale(cfg.lambda_spectrogram));
        let grads = bind.gradients(&total.backward());
        (
            grads,
            FinetuneLosses {
                ctc: ctc.item(),
                head: head.item(),
                spectrogram: spec.item(),
                total: total.item(),
                grad_norm: 0.0,
                skipped: false,
            },
        )
    };
    let mut grads = grads;
    let norm = grad_norm(&grads);
    let mut losses = FinetuneLosses { grad_norm: norm, ..losses };
    if !norm.is_finite() || !losses.total.is_finite() {
        log::warn!("non-finite fine-tuning gradient; update skipped");
        losses.skipped = true;
        return Ok(losses);
    }
    clip_grad_norm(&mut grads, cfg.clip_norm);
    opt.step(store, &grads, cfg.lr);
    Ok(losses)
}
