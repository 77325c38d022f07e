use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::audio::FilterKernel;
use crate::autograd::{Array, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Binder, Builder, PRelu, ParamId, WnConv1d, WnLinear};

/// `x + conv(prelu(x))` at constant rate and width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResBlock {
    pub act: PRelu,
    pub conv: WnConv1d,
}

impl ResBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize, kernel: usize) -> Self {
        let pad = (kernel - 1) / 2;
        ResBlock {
            act: b.prelu(&format!("{name}.act"), channels),
            conv: b.conv1d(&format!("{name}.conv"), channels, channels, kernel, 1, (pad, kernel - 1 - pad)),
        }
    }

    pub fn forward(&self, bind: &Binder, x: &Tensor) -> Tensor {
        x.add(&self.conv.forward(bind, &self.act.forward(bind, x)))
    }
}

/// Trainable scalars of the deterministic noise-level embedding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FourierEmbedding {
    pub alpha: ParamId,
    pub beta_emb: ParamId,
    pub pairs: usize,
}

/// `[cos(2π f m)]_m ++ [sin(2π f m)]_m` with `f = alpha ln σ + beta_emb`.
pub fn fourier_embed(sigma: f64, alpha: f64, beta_emb: f64, pairs: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("noise level {sigma} must be positive")));
    }
    let f = alpha * sigma.ln() + beta_emb;
    let cos = (0..pairs).map(|m| (2.0 * PI * f * m as f64).cos());
    let sin = (0..pairs).map(|m| (2.0 * PI * f * m as f64).sin());
    Ok(cos.chain(sin).collect())
}

impl FourierEmbedding {
    /// Initialised so that `f` sweeps `[0, 1]` over `[sigma_min, sigma_max]`.
    pub fn new(b: &mut Builder, name: &str, pairs: usize, sigma_min: f64, sigma_max: f64) -> Self {
        let alpha = 1.0 / (sigma_max / sigma_min).ln();
        FourierEmbedding {
            alpha: b.constant(&format!("{name}.alpha"), &[1], alpha),
            beta_emb: b.constant(&format!("{name}.beta_emb"), &[1], -alpha * sigma_min.ln()),
            pairs,
        }
    }

    /// `[batch, 2M]` embeddings for per-item noise levels.
    pub fn forward(&self, bind: &Binder, sigmas: &[f64]) -> Tensor {
        let logs = Tensor::constant(Array::from_shape_vec(ndarray::IxDyn(&[sigmas.len(), 1]), sigmas.iter().map(|s| s.ln()).collect()).unwrap());
        let f = logs.mul(&bind.param(self.alpha)).add(&bind.param(self.beta_emb));
        let freqs = Tensor::constant(Array::from_shape_vec(
            ndarray::IxDyn(&[1, self.pairs]),
            (0..self.pairs).map(|m| 2.0 * PI * m as f64).collect(),
        )
        .unwrap());
        let phase = f.mul(&freqs);
        Tensor::concat(&[phase.cos(), phase.sin()], 1)
    }
}

/// Per-channel scale and shift predicted from the noise embedding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Film {
    pub proj: WnLinear,
    pub channels: usize,
}

impl Film {
    /// Starts close to the identity: small weights, scale bias 1, shift bias 0.
    pub fn new(b: &mut Builder, name: &str, emb_dim: usize, channels: usize) -> Self {
        let proj = b.linear_scaled(name, emb_dim, 2 * channels, 0.1);
        if !b.store.is_shape_only() {
            let bias = b.store.value_mut(proj.b);
            for (i, v) in bias.iter_mut().enumerate() {
                *v = if i < channels { 1.0 } else { 0.0 };
            }
        }
        Film { proj, channels }
    }

    pub fn forward(&self, bind: &Binder, x: &Tensor, emb: &Tensor) -> Tensor {
        let p = self.proj.forward(bind, emb);
        let batch = p.shape()[0];
        let scale = p.narrow(1, 0, self.channels).reshape(&[batch, self.channels, 1]);
        let shift = p.narrow(1, self.channels, self.channels).reshape(&[batch, self.channels, 1]);
        film(x, &scale, &shift)
    }
}

/// `scale ⊙ x + shift`, broadcast over time. `x: [B, C, T]`, scale/shift `[B, C, 1]`.
pub fn film(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Tensor {
    x.mul(scale).add(shift)
}

/// Low-pass at the new Nyquist, then keep every `factor`-th sample.
pub fn antialiased_down(x: &Tensor, factor: usize, kernel: &FilterKernel) -> Tensor {
    x.fir_decimate(&kernel.taps, factor)
}

/// Zero-insert by `factor`, then low-pass with the kernel scaled by `factor`.
pub fn antialiased_up(x: &Tensor, factor: usize, kernel: &FilterKernel) -> Tensor {
    x.fir_interpolate(&kernel.taps, factor)
}
