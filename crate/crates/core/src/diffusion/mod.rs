//! Exponential noise schedule, input/output preconditioning, the
//! score-matching objective and the noise-consistent Langevin sampler.

mod enhance;

pub use enhance::{enhance, enhance_batch, sample_with_grad};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_min: 5e-4,
            sigma_max: 5.0,
            sigma_data: 0.2,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, sigma_data: f64) -> Result<Self> {
        let s = NoiseSchedule {
            sigma_min,
            sigma_max,
            sigma_data,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_data > 0.0) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min ({}) < sigma_max ({}) and sigma_data ({}) > 0",
                self.sigma_min, self.sigma_max, self.sigma_data
            )));
        }
        Ok(())
    }

    /// `σ_t = σ_min (σ_max / σ_min)^t`.
    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        Ok(self.sigma_min * (self.sigma_max / self.sigma_min).powf(t))
    }
}

/// Scalings that give the network unit-variance inputs and targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
}

pub fn precondition_coeffs(sigma: f64, sigma_data: f64) -> Precond {
    let sd2 = sigma_data * sigma_data;
    let total = sd2 + sigma * sigma;
    let c_skip = sd2 / total;
    Precond {
        c_skip,
        c_out: sigma * c_skip.sqrt(),
        c_in: 1.0 / total.sqrt(),
    }
}

/// Step count, Langevin constant and the per-step coefficients derived from them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub epsilon: f64,
    /// `σ_{t-Δ} / σ_t`
    pub gamma: f64,
    pub eta: f64,
    pub beta: f64,
}

impl SamplerConfig {
    pub fn delta(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

pub fn sampler_params(schedule: &NoiseSchedule, steps: usize, epsilon: f64) -> Result<SamplerConfig> {
    schedule.validate()?;
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    if !(epsilon > 1.0) {
        return Err(Error::Config(format!(
            "epsilon must exceed 1 (got {epsilon}); beta would be imaginary"
        )));
    }
    let gamma = (schedule.sigma_min / schedule.sigma_max).powf(1.0 / steps as f64);
    Ok(SamplerConfig {
        steps,
        epsilon,
        gamma,
        eta: 1.0 - gamma.powf(epsilon),
        beta: (1.0 - gamma.powf(2.0 * (epsilon - 1.0))).sqrt(),
    })
}

/// One update `x + η σ_t² S + β σ_next z`, in place.
pub fn langevin_step(x: &mut [f64], score: &[f64], sigma_t: f64, sigma_next: f64, eta: f64, beta: f64, z: Option<&[f64]>) {
    let a = eta * sigma_t * sigma_t;
    match z {
        Some(z) => {
            for ((xv, s), zv) in x.iter_mut().zip(score).zip(z) {
                *xv += a * s + beta * sigma_next * zv;
            }
        }
        None => {
            for (xv, s) in x.iter_mut().zip(score) {
                *xv += a * s;
            }
        }
    }
}

pub(crate) fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Reverse diffusion from `x ~ N(0, σ_max² I)` over `t_i = 1 - i/N`.
///
/// `score(x, σ, i)` returns the score estimate for state `x` at noise level
/// `σ` in step `i`. Fresh noise is drawn every step except the last.
pub fn sample(
    shape: &[usize],
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    mut score: impl FnMut(&Array, f64, usize) -> Result<Array>,
) -> Result<Array> {
    let n: usize = shape.iter().product();
    let init: Vec<f64> = normals(rng, n).into_iter().map(|v| v * schedule.sigma_max).collect();
    let mut x = Array::from_shape_vec(ndarray::IxDyn(shape), init).expect("shape matches element count");
    for i in 0..cfg.steps {
        let t = 1.0 - i as f64 / cfg.steps as f64;
        let t_next = 1.0 - (i + 1) as f64 / cfg.steps as f64;
        let sigma_t = schedule.sigma_at(t)?;
        let sigma_next = schedule.sigma_at(t_next)?;
        let s = score(&x, sigma_t, i)?;
        let z = (i + 1 < cfg.steps).then(|| normals(rng, n));
        let xs = x.as_slice_mut().expect("sampler state is contiguous");
        langevin_step(xs, s.as_slice().expect("score is contiguous"), sigma_t, sigma_next, cfg.eta, cfg.beta, z.as_deref());
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDivergence { step: i });
        }
    }
    Ok(x)
}

/// Per-item noise levels and Gaussian draws for one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossNoise {
    pub sigmas: Vec<f64>,
    /// `[batch, len]`
    pub z: Array,
}

/// Draws `t ~ U(0,1)` per item and `z ~ N(0, I)`.
pub fn draw_loss_noise(batch: usize, len: usize, schedule: &NoiseSchedule, rng: &mut ChaCha8Rng) -> LossNoise {
    let sigmas = (0..batch)
        .map(|_| schedule.sigma_at(rng.gen_range(0.0..=1.0)).expect("t drawn inside [0, 1]"))
        .collect();
    let z = Array::from_shape_vec(ndarray::IxDyn(&[batch, len]), normals(rng, batch * len)).unwrap();
    LossNoise { sigmas, z }
}

/// `mean_b ‖σ_b S(x0_b + σ_b z_b, σ_b) + z_b‖² / D`.
///
/// `score` maps the noisy batch `[batch, len]` and per-item sigmas to score
/// estimates of the same shape.
pub fn score_matching_loss(x0: &Tensor, noise: &LossNoise, score: impl FnOnce(&Tensor, &[f64]) -> Tensor) -> Tensor {
    let (batch, len) = (x0.shape()[0], x0.shape()[1]);
    let sig = Tensor::constant(Array::from_shape_vec(ndarray::IxDyn(&[batch, 1]), noise.sigmas.clone()).unwrap());
    let z = Tensor::constant(noise.z.clone());
    let x = x0.add(&z.mul(&sig));
    let s = score(&x, &noise.sigmas);
    s.mul(&sig).add(&z).square().sum().scale(1.0 / (batch * len) as f64)
}
