use ndarray::{Axis, Ix2, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ctc::{ctc_loss, greedy_decode};
use crate::adversarial::LogMel;
use crate::audio::SpectralConfig;
use crate::autograd::{Array, Tensor};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, AdamW, Binder, Builder, Group, PRelu, ParamStore, WnConv1d};
use crate::synth::{SyntheticUtterance, BLANK, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub window_length: usize,
    pub hop_length: usize,
    pub mel_bins: usize,
    pub hidden: usize,
    pub kernel_size: usize,
    pub layers: usize,
    pub classes: usize,
    pub blank: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            sample_rate: 8000,
            fft_size: 256,
            window_length: 200,
            hop_length: 80,
            mel_bins: 24,
            hidden: 32,
            kernel_size: 5,
            layers: 3,
            classes: NUM_CLASSES,
            blank: BLANK,
        }
    }
}

/// Small convolutional frame classifier over log-mel features, trained with
/// CTC and then kept frozen.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhonemePredictor {
    pub config: PredictorConfig,
    pub store: ParamStore,
    mel: LogMel,
    convs: Vec<WnConv1d>,
    acts: Vec<PRelu>,
    out: WnConv1d,
}

impl PhonemePredictor {
    pub fn new(cfg: &PredictorConfig, seed: u64) -> Result<Self> {
        if cfg.classes < 2 || cfg.blank >= cfg.classes || cfg.layers == 0 || cfg.kernel_size % 2 == 0 {
            return Err(Error::Config("invalid predictor configuration".into()));
        }
        let mel = LogMel::new(
            &SpectralConfig {
                window_length: cfg.window_length,
                hop_length: cfg.hop_length,
                fft_size: cfg.fft_size,
                mel_bins: cfg.mel_bins,
                ..SpectralConfig::default()
            },
            cfg.sample_rate,
        )?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng, Group::Predictor, "phoneme");
        let k = cfg.kernel_size;
        let pad = (k / 2, k / 2);
        let mut convs = Vec::new();
        let mut acts = Vec::new();
        let mut cin = cfg.mel_bins;
        for i in 0..cfg.layers {
            convs.push(b.conv1d(&format!("conv{i}"), cin, cfg.hidden, k, 1, pad));
            acts.push(b.prelu(&format!("act{i}"), cfg.hidden));
            cin = cfg.hidden;
        }
        let out = b.conv1d("out", cfg.hidden, cfg.classes, 1, 1, (0, 0));
        Ok(PhonemePredictor {
            config: cfg.clone(),
            store,
            mel,
            convs,
            acts,
            out,
        })
    }

    pub fn frame_rate(&self) -> f64 {
        self.config.sample_rate as f64 / self.config.hop_length as f64
    }

    fn forward(&self, bind: &Binder, x: &Tensor) -> Tensor {
        // log10 mel magnitudes sit roughly in [-5, 1]
        let feats = self.mel.forward(x).add_scalar(2.0).scale(0.5).permute(&[0, 2, 1]);
        let mut h = feats;
        for (c, a) in self.convs.iter().zip(&self.acts) {
            h = a.forward(bind, &c.forward(bind, &h));
        }
        self.out.forward(bind, &h).permute(&[0, 2, 1]).log_softmax()
    }

    /// Per-frame log-probabilities `[B, frames, classes]` for `x: [B, T]`.
    /// Gradients reach `x`, never the predictor weights.
    pub fn log_probs(&self, x: &Tensor) -> Tensor {
        self.forward(&Binder::frozen(&self.store), x)
    }

    /// Greedy collapsed label sequence per item.
    pub fn decode(&self, x: &Tensor) -> Vec<Vec<usize>> {
        let lp = self.log_probs(&x.detach());
        let v = lp.value();
        (0..v.shape()[0])
            .map(|b| {
                let m = v.index_axis(Axis(0), b).into_dimensionality::<Ix2>().unwrap();
                greedy_decode(m, self.config.blank)
            })
            .collect()
    }

    /// CTC training on labelled utterances. Returns the per-step mean loss.
    pub fn train(
        &mut self,
        data: &[SyntheticUtterance],
        steps: usize,
        batch: usize,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        if data.is_empty() || batch == 0 {
            return Err(Error::InvalidInput("no training data".into()));
        }
        let len = data[0].audio.len();
        if data.iter().any(|u| u.audio.len() != len) {
            return Err(Error::InvalidInput("training utterances must share a length".into()));
        }
        let mut opt = AdamW::new(0.9, 0.99, 0.0);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut idx = Vec::with_capacity(batch);
            while idx.len() < batch {
                if cursor == order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let samples: Vec<f64> = idx.iter().flat_map(|&i| data[i].audio.samples.iter().copied()).collect();
            let x = Tensor::constant(Array::from_shape_vec(IxDyn(&[batch, len]), samples).unwrap());
            let bind = Binder::new(&self.store, &[Group::Predictor]);
            let lp = self.forward(&bind, &x);
            let frames = lp.shape()[1];
            let mut total = Tensor::scalar(0.0);
            for (j, &i) in idx.iter().enumerate() {
                let item = lp.narrow(0, j, 1).reshape(&[frames, self.config.classes]);
                total = total.add(&ctc_loss(&item, &data[i].labels, self.config.blank)?);
            }
            let loss = total.scale(1.0 / batch as f64);
            let mut grads = bind.gradients(&loss.backward());
            drop(bind);
            clip_grad_norm(&mut grads, 10.0);
            opt.step(&mut self.store, &grads, lr);
            history.push(loss.item());
        }
        Ok(history)
    }
}

/// CTC loss of the greedy transcription of `clean` under the predictor's
/// log-probabilities for `enhanced`. Both `[B, T]`; averaged over the batch.
/// Items whose clean transcription is empty contribute zero.
pub fn ctc_phoneme_loss(enhanced: &Tensor, clean: &Tensor, predictor: &PhonemePredictor) -> Result<Tensor> {
    if enhanced.shape() != clean.shape() || enhanced.ndim() != 2 {
        return Err(Error::InvalidInput(format!(
            "shapes differ: {:?} vs {:?}",
            enhanced.shape(),
            clean.shape()
        )));
    }
    let targets = predictor.decode(clean);
    let lp = predictor.log_probs(enhanced);
    let (b, frames, classes) = (lp.shape()[0], lp.shape()[1], lp.shape()[2]);
    let mut total = Tensor::scalar(0.0);
    for (i, target) in targets.iter().enumerate() {
        if target.is_empty() {
            log::warn!("clean item {i} decodes to an empty phoneme sequence; skipped");
            continue;
        }
        let item = lp.narrow(0, i, 1).reshape(&[frames, classes]);
        total = total.add(&ctc_loss(&item, target, predictor.config.blank)?);
    }
    Ok(total.scale(1.0 / b as f64))
}
