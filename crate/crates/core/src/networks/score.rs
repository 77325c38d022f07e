use serde::{Deserialize, Serialize};

use super::blocks::{antialiased_down, antialiased_up, Film, FourierEmbedding, ResBlock};
use super::conditioning::ConditioningFeatures;
use super::{kernel_for, ArchitectureConfig};
use crate::autograd::Tensor;
use crate::nn::{Binder, Builder, Gru, LoraTarget, PRelu, WnConv1d};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreEncoderStage {
    pub res: Vec<ResBlock>,
    pub film: Film,
    pub down: WnConv1d,
    pub factor: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreDecoderStage {
    pub cond_proj: WnConv1d,
    pub res: Vec<ResBlock>,
    pub film: Film,
    pub up: WnConv1d,
    pub factor: usize,
}

/// U-Net over the noisy waveform with anti-aliased rate changes, noise-level
/// FiLM at every stage and conditioning features added on the decoder side.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreNet {
    pub embedding: FourierEmbedding,
    pub input: WnConv1d,
    pub encoder: Vec<ScoreEncoderStage>,
    pub bottleneck_proj: WnConv1d,
    pub grus: Vec<Gru>,
    pub bottleneck_film: Film,
    pub decoder: Vec<ScoreDecoderStage>,
    pub out_act: PRelu,
    pub out: WnConv1d,
}

fn same_pad(k: usize) -> (usize, usize) {
    ((k - 1) / 2, k - 1 - (k - 1) / 2)
}

impl ScoreNet {
    pub fn new(b: &mut Builder, cfg: &ArchitectureConfig, sigma_min: f64, sigma_max: f64) -> Self {
        let k = cfg.kernel_size;
        let rk = cfg.rate_kernel;
        let emb_dim = 2 * cfg.embedding_pairs;
        let embedding = FourierEmbedding::new(b, "embedding", cfg.embedding_pairs, sigma_min, sigma_max);
        let input = b.conv1d("input", 1, cfg.channels(0), k, 1, same_pad(k));
        let mut encoder = Vec::new();
        for (s, &f) in cfg.encoder_factors().iter().enumerate() {
            let (cin, cout) = (cfg.channels(s), cfg.channels(s + 1));
            let mut sb = b.scope(&format!("enc{s}"));
            let res = (0..2).map(|i| ResBlock::new(&mut sb, &format!("res{i}"), cin, k)).collect();
            let film = Film::new(&mut sb, "film", emb_dim, cin);
            let down = sb.conv1d("down", cin, cout, rk, 1, same_pad(rk));
            encoder.push(ScoreEncoderStage { res, film, down, factor: f });
        }
        let c4 = cfg.channels(4);
        let bottleneck_proj = b.conv1d("bottleneck_proj", c4, c4, 1, 1, (0, 0));
        let grus = (0..cfg.gru_layers_score).map(|i| b.gru(&format!("gru{i}"), c4, c4)).collect();
        let bottleneck_film = Film::new(b, "bottleneck_film", emb_dim, c4);
        let mut decoder = Vec::new();
        for (j, &u) in cfg.rate_factors.iter().enumerate() {
            let (cin, cout) = (cfg.channels(4 - j), cfg.channels(3 - j));
            let mut sb = b.scope(&format!("dec{j}"));
            let cond_proj = sb.conv1d("cond_proj", cin, cin, 1, 1, (0, 0));
            let res = (0..2).map(|i| ResBlock::new(&mut sb, &format!("res{i}"), cin, k)).collect();
            let film = Film::new(&mut sb, "film", emb_dim, cin);
            let up = sb.conv1d("up", cin, cout, rk, 1, same_pad(rk));
            decoder.push(ScoreDecoderStage {
                cond_proj,
                res,
                film,
                up,
                factor: u,
            });
        }
        let out_act = b.prelu("out_act", cfg.channels(0));
        let out = b.conv1d("out", cfg.channels(0), 1, k, 1, same_pad(k));
        ScoreNet {
            embedding,
            input,
            encoder,
            bottleneck_proj,
            grus,
            bottleneck_film,
            decoder,
            out_act,
            out,
        }
    }

    /// Raw network output for the scaled input `x_in: [B, 1, T]`.
    pub fn forward(&self, bind: &Binder, x_in: &Tensor, cond: &ConditioningFeatures, sigmas: &[f64]) -> Tensor {
        let emb = self.embedding.forward(bind, sigmas);
        let mut h = self.input.forward(bind, x_in);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for st in &self.encoder {
            for r in &st.res {
                h = r.forward(bind, &h);
            }
            h = st.film.forward(bind, &h, &emb);
            skips.push(h.clone());
            let low = antialiased_down(&h, st.factor, &kernel_for(st.factor));
            h = st.down.forward(bind, &low);
        }
        h = h.add(&self.bottleneck_proj.forward(bind, &cond.bottleneck));
        for g in &self.grus {
            h = h.add(&g.forward(bind, &h));
        }
        h = self.bottleneck_film.forward(bind, &h, &emb);
        for (j, st) in self.decoder.iter().enumerate() {
            h = h.add(&st.cond_proj.forward(bind, &cond.stages[j]));
            for r in &st.res {
                h = r.forward(bind, &h);
            }
            h = st.film.forward(bind, &h, &emb);
            let c = st.up.forward(bind, &h);
            h = antialiased_up(&c, st.factor, &kernel_for(st.factor)).add(&skips[skips.len() - 1 - j]);
        }
        self.out.forward(bind, &self.out_act.forward(bind, &h))
    }

    pub fn visit_lora_targets(&mut self, f: &mut dyn FnMut(&mut dyn LoraTarget)) {
        for st in &mut self.encoder {
            f(&mut st.film.proj);
        }
        f(&mut self.bottleneck_proj);
        for g in &mut self.grus {
            f(&mut g.input_proj);
            f(&mut g.hidden_proj);
        }
        f(&mut self.bottleneck_film.proj);
        for st in &mut self.decoder {
            f(&mut st.cond_proj);
            f(&mut st.film.proj);
        }
    }
}
