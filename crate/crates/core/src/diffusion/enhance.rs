use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;

use super::{langevin_step, normals, sample, SamplerConfig};
use crate::audio::AudioBuffer;
use crate::autograd::{Array, Tensor};
use crate::error::{Error, Result};
use crate::networks::{ConditioningFeatures, Model};
use crate::nn::{Binder, ParamStore};

/// Enhances `[B, T]` degraded signals of any length: pads to the hop grid,
/// runs the conditioning network once, samples and trims.
pub fn enhance_batch(
    model: &Model,
    store: &ParamStore,
    degraded: &Array,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array> {
    if degraded.ndim() != 2 || degraded.shape()[1] == 0 {
        return Err(Error::Shape(format!("expected non-empty [batch, samples], got {:?}", degraded.shape())));
    }
    let (b, t) = (degraded.shape()[0], degraded.shape()[1]);
    let padded = t.div_ceil(model.hop()) * model.hop();
    let y = Tensor::constant(degraded.clone()).pad(1, 0, padded - t);
    let bind = Binder::frozen(store);
    let cond = model.condition(&bind, &y)?.features;
    let x = sample(&[b, padded], sampler, &model.schedule, rng, |x, sigma, _| {
        let s = model.score(&bind, &Tensor::constant(x.clone()), &cond, &vec![sigma; b])?;
        Ok(s.value().clone())
    })?;
    Ok(x.slice_axis(ndarray::Axis(1), (0..t).into()).to_owned())
}

/// Single-signal convenience wrapper around [`enhance_batch`].
pub fn enhance(
    model: &Model,
    store: &ParamStore,
    degraded: &AudioBuffer,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AudioBuffer> {
    if degraded.sample_rate != model.config.sample_rate {
        return Err(Error::InvalidInput(format!(
            "input at {} Hz, model expects {} Hz",
            degraded.sample_rate, model.config.sample_rate
        )));
    }
    if degraded.is_empty() {
        return Err(Error::InvalidInput("empty input".into()));
    }
    let y = Array::from_shape_vec(IxDyn(&[1, degraded.len()]), degraded.samples.clone()).unwrap();
    let x = enhance_batch(model, store, &y, sampler, rng)?;
    AudioBuffer::new(x.iter().copied().collect(), degraded.sample_rate)
}

/// Sampler whose last `grad_steps` updates are recorded in the graph.
///
/// Earlier steps run without gradients on detached features. `cond` may carry
/// gradients (through `bind`) into the conditioning network. `[B, T]` output.
pub fn sample_with_grad(
    model: &Model,
    bind: &Binder,
    cond: &ConditioningFeatures,
    shape: (usize, usize),
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
    grad_steps: usize,
) -> Result<Tensor> {
    let (b, t) = shape;
    let n = b * t;
    let frozen = Binder::frozen(bind.store());
    let detached = cond.detach();
    let sched = &model.schedule;
    let init: Vec<f64> = normals(rng, n).into_iter().map(|v| v * sched.sigma_max).collect();
    let mut x = Tensor::from_vec(&[b, t], init);
    let first_grad = sampler.steps.saturating_sub(grad_steps);
    for i in 0..sampler.steps {
        let t_now = 1.0 - i as f64 / sampler.steps as f64;
        let t_next = 1.0 - (i + 1) as f64 / sampler.steps as f64;
        let (s_now, s_next) = (sched.sigma_at(t_now)?, sched.sigma_at(t_next)?);
        let sig = vec![s_now; b];
        if i < first_grad {
            let s = model.score(&frozen, &x, &detached, &sig)?;
            let z = (i + 1 < sampler.steps).then(|| normals(rng, n));
            let mut xs = x.to_vec();
            langevin_step(&mut xs, &s.to_vec(), s_now, s_next, sampler.eta, sampler.beta, z.as_deref());
            x = Tensor::from_vec(&[b, t], xs);
        } else {
            let s = model.score(bind, &x, cond, &sig)?;
            let mut next = x.add(&s.scale(sampler.eta * s_now * s_now));
            if i + 1 < sampler.steps {
                let z = Tensor::from_vec(&[b, t], normals(rng, n));
                next = next.add(&z.scale(sampler.beta * s_next));
            }
            x = next;
        }
        if x.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDivergence { step: i });
        }
    }
    Ok(x)
}
