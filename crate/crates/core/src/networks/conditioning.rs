use serde::{Deserialize, Serialize};

use super::blocks::ResBlock;
use super::ArchitectureConfig;
use crate::autograd::Tensor;
use crate::nn::{Binder, Builder, Gru, LoraTarget, PRelu, WnConv1d, WnConvTranspose1d};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderStage {
    pub res: Vec<ResBlock>,
    pub act: PRelu,
    pub down: WnConv1d,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderStage {
    pub res: Vec<ResBlock>,
    pub act: PRelu,
    pub up: WnConvTranspose1d,
}

/// 1×1 projection of an encoder stage output, pooled to the bottleneck rate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adapter {
    pub proj: WnConv1d,
    pub pool: usize,
}

/// Plain strided encoder/decoder with a recurrent bottleneck and a waveform head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditioningNet {
    pub input: WnConv1d,
    pub encoder: Vec<EncoderStage>,
    pub adapters: Vec<Adapter>,
    pub grus: Vec<Gru>,
    pub decoder: Vec<DecoderStage>,
    pub head_act: PRelu,
    pub head: WnConv1d,
}

/// Features the score network consumes.
#[derive(Clone, Debug)]
pub struct ConditioningFeatures {
    /// `[B, C_4, T / hop]`
    pub bottleneck: Tensor,
    /// Inputs of the four decoder stages, from the bottleneck outwards.
    pub stages: Vec<Tensor>,
}

impl ConditioningFeatures {
    pub fn detach(&self) -> ConditioningFeatures {
        ConditioningFeatures {
            bottleneck: self.bottleneck.detach(),
            stages: self.stages.iter().map(|t| t.detach()).collect(),
        }
    }
}

pub struct ConditioningOutput {
    pub features: ConditioningFeatures,
    /// Waveform head output `[B, T]`.
    pub head: Tensor,
    /// Final full-rate decoder activations `[B, C_0, T]`.
    pub decoder_out: Tensor,
}

impl ConditioningNet {
    pub fn new(b: &mut Builder, cfg: &ArchitectureConfig) -> Self {
        let k = cfg.kernel_size;
        let pad = ((k - 1) / 2, k - 1 - (k - 1) / 2);
        let input = b.conv1d("input", 1, cfg.channels(0), k, 1, pad);
        let down = cfg.encoder_factors();
        let mut encoder = Vec::new();
        for (s, &f) in down.iter().enumerate() {
            let (cin, cout) = (cfg.channels(s), cfg.channels(s + 1));
            let mut sb = b.scope(&format!("enc{s}"));
            let res = (0..2).map(|i| ResBlock::new(&mut sb, &format!("res{i}"), cin, k)).collect();
            let act = sb.prelu("act", cin);
            // kernel twice the stride so every input sample is seen
            let down = sb.conv1d("down", cin, cout, 2 * f, f, (f / 2, f - f / 2));
            encoder.push(EncoderStage { res, act, down });
        }
        let c4 = cfg.channels(4);
        let hop = cfg.hop();
        let mut rate = 1;
        let mut adapters = Vec::new();
        for s in 0..3 {
            rate *= down[s];
            adapters.push(Adapter {
                proj: b.conv1d(&format!("adapt{s}"), cfg.channels(s + 1), c4, 1, 1, (0, 0)),
                pool: hop / rate,
            });
        }
        let grus = (0..cfg.gru_layers_cond).map(|i| b.gru(&format!("gru{i}"), c4, c4)).collect();
        let mut decoder = Vec::new();
        for (j, &u) in cfg.rate_factors.iter().enumerate() {
            let (cin, cout) = (cfg.channels(4 - j), cfg.channels(3 - j));
            let mut sb = b.scope(&format!("dec{j}"));
            let res = (0..2).map(|i| ResBlock::new(&mut sb, &format!("res{i}"), cin, k)).collect();
            let act = sb.prelu("act", cin);
            let up = sb.conv_transpose1d("up", cin, cout, 2 * u, u, (u / 2, u - u / 2));
            decoder.push(DecoderStage { res, act, up });
        }
        let head_act = b.prelu("head_act", cfg.channels(0));
        let head = b.conv1d("head", cfg.channels(0), 1, k, 1, pad);
        ConditioningNet {
            input,
            encoder,
            adapters,
            grus,
            decoder,
            head_act,
            head,
        }
    }

    /// Convolutional encoder only: stage outputs at `/8, /40, /120, /240`.
    pub fn encode(&self, bind: &Binder, y: &Tensor) -> Vec<Tensor> {
        let mut h = self.input.forward(bind, y);
        let mut outs = Vec::with_capacity(self.encoder.len());
        for st in &self.encoder {
            for r in &st.res {
                h = r.forward(bind, &h);
            }
            h = st.down.forward(bind, &st.act.forward(bind, &h));
            outs.push(h.clone());
        }
        outs
    }

    /// `y: [B, 1, T]` with `T` a multiple of the hop.
    pub fn forward(&self, bind: &Binder, y: &Tensor) -> ConditioningOutput {
        let enc = self.encode(bind, y);
        let mut h = enc[enc.len() - 1].clone();
        for (a, e) in self.adapters.iter().zip(&enc) {
            h = h.add(&a.proj.forward(bind, e).avg_pool_last(a.pool));
        }
        for g in &self.grus {
            h = h.add(&g.forward(bind, &h));
        }
        let bottleneck = h.clone();
        let mut stages = Vec::with_capacity(self.decoder.len());
        for st in &self.decoder {
            stages.push(h.clone());
            for r in &st.res {
                h = r.forward(bind, &h);
            }
            h = st.up.forward(bind, &st.act.forward(bind, &h));
        }
        let out = self.head.forward(bind, &self.head_act.forward(bind, &h));
        let (batch, len) = (out.shape()[0], out.shape()[2]);
        ConditioningOutput {
            features: ConditioningFeatures { bottleneck, stages },
            head: out.reshape(&[batch, len]),
            decoder_out: h,
        }
    }

    pub fn visit_lora_targets(&mut self, f: &mut dyn FnMut(&mut dyn LoraTarget)) {
        for a in &mut self.adapters {
            f(&mut a.proj);
        }
        for g in &mut self.grus {
            f(&mut g.input_proj);
            f(&mut g.hidden_proj);
        }
    }
}
