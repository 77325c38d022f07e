//! Discriminators, adversarial and spectral losses, and mixture-density losses.

mod discriminators;
mod mel;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use discriminators::{
    DiscOutput, DiscriminatorBank, DiscriminatorConfig, PeriodDiscriminator, ResolutionDiscriminator,
};
pub use mel::{mel_loss, LogMel, LOG_FLOOR};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::networks::MelMixture;
use crate::nn::Binder;

/// Least-squares GAN losses summed over sub-discriminators: `(d_loss, g_loss)`.
pub fn lsgan_losses(real: &[Tensor], fake: &[Tensor]) -> (Tensor, Tensor) {
    let mut d = Tensor::scalar(0.0);
    let mut g = Tensor::scalar(0.0);
    for (r, f) in real.iter().zip(fake) {
        d = d.add(&r.add_scalar(-1.0).square().mean()).add(&f.square().mean());
        g = g.add(&f.add_scalar(-1.0).square().mean());
    }
    (d, g)
}

/// Mean absolute feature difference averaged over every layer of every
/// sub-discriminator. Real features are detached.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::InvalidInput("discriminator counts differ".into()));
    }
    let mut total = Tensor::scalar(0.0);
    let mut count = 0usize;
    for (rs, fs) in real.iter().zip(fake) {
        if rs.len() != fs.len() {
            return Err(Error::InvalidInput("feature layer counts differ".into()));
        }
        for (r, f) in rs.iter().zip(fs) {
            if r.shape() != f.shape() {
                return Err(Error::InvalidInput(format!(
                    "feature shapes differ: {:?} vs {:?}",
                    r.shape(),
                    f.shape()
                )));
            }
            total = total.add(&f.sub(&r.detach()).abs().mean());
            count += 1;
        }
    }
    if count == 0 {
        return Ok(total);
    }
    Ok(total.scale(1.0 / count as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adversarial: f64,
    pub feature_matching: f64,
    pub mel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1.0,
            feature_matching: 2.0,
            mel: 45.0,
        }
    }
}

/// Itemised generator-side losses on the conditioning waveform head.
pub struct GeneratorLosses {
    pub adversarial: Tensor,
    pub feature_matching: Tensor,
    pub mel: Tensor,
    pub total: Tensor,
}

impl GeneratorLosses {
    pub fn itemized(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("g_adv", self.adversarial.item()),
            ("g_fm", self.feature_matching.item()),
            ("g_mel", self.mel.item()),
            ("g_head_total", self.total.item()),
        ]
    }
}

/// `λ_adv·g_loss + λ_fm·feature_matching + λ_mel·mel_loss` of `head` against `clean`.
///
/// Discriminator parameters should be frozen in `bind`.
pub fn generator_feature_loss(
    bind: &Binder,
    bank: &DiscriminatorBank,
    clean: &Tensor,
    head: &Tensor,
    mel: &LogMel,
    weights: &LossWeights,
) -> Result<GeneratorLosses> {
    let mel_term = mel_loss(clean, head, mel)?;
    let real = bank.forward(bind, clean);
    let fake = bank.forward(bind, head);
    let fake_scores: Vec<Tensor> = fake.iter().map(|o| o.score.clone()).collect();
    let real_scores: Vec<Tensor> = real.iter().map(|o| o.score.detach()).collect();
    let (_, adv) = lsgan_losses(&real_scores, &fake_scores);
    let real_feats: Vec<Vec<Tensor>> = real.into_iter().map(|o| o.features).collect();
    let fake_feats: Vec<Vec<Tensor>> = fake.into_iter().map(|o| o.features).collect();
    let fm = feature_matching_loss(&real_feats, &fake_feats)?;
    let total = adv
        .scale(weights.adversarial)
        .add(&fm.scale(weights.feature_matching))
        .add(&mel_term.scale(weights.mel));
    Ok(GeneratorLosses {
        adversarial: adv,
        feature_matching: fm,
        mel: mel_term,
        total,
    })
}

/// Discriminator loss with the generated signal cut from the graph.
pub fn discriminator_loss(bind: &Binder, bank: &DiscriminatorBank, clean: &Tensor, head: &Tensor) -> Tensor {
    let real: Vec<Tensor> = bank.forward(bind, clean).into_iter().map(|o| o.score).collect();
    let fake: Vec<Tensor> = bank.forward(bind, &head.detach()).into_iter().map(|o| o.score).collect();
    lsgan_losses(&real, &fake).0
}

/// Mean negative log-likelihood of a diagonal Gaussian mixture.
///
/// `logits: [N, K]`, `means`/`logvars: [N, K, D]`, `target: [N, D]`.
pub fn mdn_loss(logits: &Tensor, means: &Tensor, logvars: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.ndim() != 2 || means.ndim() != 3 || target.ndim() != 2 {
        return Err(Error::Shape("mixture expects [N, K], [N, K, D] and [N, D]".into()));
    }
    let (n, k, d) = (means.shape()[0], means.shape()[1], means.shape()[2]);
    if logits.shape() != [n, k] || logvars.shape() != means.shape() || target.shape() != [n, d] {
        return Err(Error::Shape(format!(
            "inconsistent mixture shapes {:?} {:?} {:?} {:?}",
            logits.shape(),
            means.shape(),
            logvars.shape(),
            target.shape()
        )));
    }
    let diff = target.reshape(&[n, 1, d]).sub(means);
    let quad = diff.square().mul(&logvars.neg().exp()).add(logvars).sum_axis(2, false);
    let log_comp = quad.scale(-0.5).add_scalar(-0.5 * d as f64 * (2.0 * PI).ln());
    let log_p = logits.log_softmax().add(&log_comp).logsumexp(1, false);
    Ok(log_p.mean().neg())
}

/// Mixture NLL of per-frame log-mel targets `[B, F, mels]`.
pub fn mel_mixture_loss(mix: &MelMixture, target: &Tensor) -> Result<Tensor> {
    let (b, k, m, f) = {
        let s = mix.means.shape();
        (s[0], s[1], s[2], s[3])
    };
    if target.shape() != [b, f, m] {
        return Err(Error::Shape(format!("mel target {:?} vs mixture [{b}, {f}, {m}]", target.shape())));
    }
    let logits = mix.logits.permute(&[0, 2, 1]).reshape(&[b * f, k]);
    let means = mix.means.permute(&[0, 3, 1, 2]).reshape(&[b * f, k, m]);
    let logvars = mix.logvars.permute(&[0, 3, 1, 2]).reshape(&[b * f, k, m]);
    mdn_loss(&logits, &means, &logvars, &target.reshape(&[b * f, m]))
}

/// Single-Gaussian NLL per sample, averaged. All arguments `[B, T]`.
pub fn waveform_gaussian_loss(mean: &Tensor, logvar: &Tensor, target: &Tensor) -> Result<Tensor> {
    if mean.shape() != target.shape() || logvar.shape() != target.shape() {
        return Err(Error::Shape("waveform mixture shapes differ".into()));
    }
    let n = target.len();
    let logits = Tensor::zeros(&[n, 1]);
    mdn_loss(&logits, &mean.reshape(&[n, 1, 1]), &logvar.reshape(&[n, 1, 1]), &target.reshape(&[n, 1]))
}
