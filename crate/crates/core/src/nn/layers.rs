use ndarray::{Array2, Axis, Ix2, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Binder, Group, Init, ParamId, ParamStore};
use crate::autograd::{Array, Tensor};

/// Creates layers inside a store under a name prefix and ownership group.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub group: Group,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, group: Group, prefix: &str) -> Self {
        Builder {
            store,
            rng,
            group,
            prefix: prefix.to_string(),
        }
    }

    /// A builder for a nested name scope sharing this store and rng.
    pub fn scope<'b>(&'b mut self, name: &str) -> Builder<'b> {
        let prefix = self.full(name);
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            group: self.group,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let full = self.full(name);
        let rng = &mut *self.rng;
        self.store
            .add(full, self.group, shape, || Init { rng }.uniform(shape, bound))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let full = self.full(name);
        self.store.add(full, self.group, shape, || Init::constant(shape, v))
    }

    /// Weight-norm magnitude initialised to the row norms of `v`, so the
    /// effective weight starts equal to `v`.
    fn wn_gain(&mut self, name: &str, v: ParamId, norm_axes: &[usize], shape: &[usize]) -> ParamId {
        let full = self.full(name);
        let vv = self.store.value(v).clone();
        let axes = norm_axes.to_vec();
        self.store.add(full, self.group, shape, move || {
            let mut sq = vv.mapv(|x| x * x);
            for &ax in axes.iter().rev() {
                sq = sq.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            }
            sq.mapv(f64::sqrt)
        })
    }

    pub fn conv1d(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: (usize, usize)) -> WnConv1d {
        self.conv1d_scaled(name, cin, cout, kernel, stride, pad, 1.0)
    }

    /// Convolution whose initial weights are scaled by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d_scaled(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: (usize, usize), gain: f64) -> WnConv1d {
        let bound = gain / ((cin * kernel) as f64).sqrt();
        let v = self.uniform(&format!("{name}.v"), &[cout, cin, kernel], bound);
        let g = self.wn_gain(&format!("{name}.g"), v, &[1, 2], &[cout, 1, 1]);
        let b = self.uniform(&format!("{name}.b"), &[cout], bound);
        WnConv1d {
            name: self.full(name),
            v,
            g,
            b,
            cin,
            cout,
            kernel,
            stride,
            pad,
            lora: None,
        }
    }

    pub fn conv_transpose1d(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: (usize, usize)) -> WnConvTranspose1d {
        let bound = 1.0 / ((cin * kernel) as f64 / stride as f64).sqrt();
        let v = self.uniform(&format!("{name}.v"), &[cin, cout, kernel], bound);
        let g = self.wn_gain(&format!("{name}.g"), v, &[0, 2], &[1, cout, 1]);
        let b = self.uniform(&format!("{name}.b"), &[cout], bound);
        WnConvTranspose1d {
            v,
            g,
            b,
            stride,
            pad,
        }
    }

    pub fn conv2d(&mut self, name: &str, cin: usize, cout: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> WnConv2d {
        let bound = 1.0 / ((cin * kernel.0 * kernel.1) as f64).sqrt();
        let v = self.uniform(&format!("{name}.v"), &[cout, cin, kernel.0, kernel.1], bound);
        let g = self.wn_gain(&format!("{name}.g"), v, &[1, 2, 3], &[cout, 1, 1, 1]);
        let b = self.uniform(&format!("{name}.b"), &[cout], bound);
        WnConv2d {
            v,
            g,
            b,
            stride,
            padding,
        }
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize) -> WnLinear {
        self.linear_scaled(name, inp, out, 1.0)
    }

    /// Linear layer whose initial weights are scaled by `gain`.
    pub fn linear_scaled(&mut self, name: &str, inp: usize, out: usize, gain: f64) -> WnLinear {
        let bound = gain / (inp as f64).sqrt();
        let v = self.uniform(&format!("{name}.v"), &[out, inp], bound);
        let g = self.wn_gain(&format!("{name}.g"), v, &[1], &[out, 1]);
        let b = self.uniform(&format!("{name}.b"), &[out], bound);
        WnLinear {
            name: self.full(name),
            v,
            g,
            b,
            inp,
            out,
            lora: None,
        }
    }

    pub fn prelu(&mut self, name: &str, channels: usize) -> PRelu {
        PRelu {
            alpha: self.constant(&format!("{name}.alpha"), &[channels], 0.25),
        }
    }

    pub fn gru(&mut self, name: &str, input: usize, hidden: usize) -> Gru {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = self.uniform(&format!("{name}.w_ih"), &[3 * hidden, input], bound);
        let w_hh = self.uniform(&format!("{name}.w_hh"), &[3 * hidden, hidden], bound);
        let b_ih = self.uniform(&format!("{name}.b_ih"), &[3 * hidden], bound);
        let b_hh = self.uniform(&format!("{name}.b_hh"), &[3 * hidden], bound);
        Gru {
            input_proj: Dense {
                name: self.full(&format!("{name}.w_ih")),
                w: w_ih,
                out: 3 * hidden,
                inp: input,
                lora: None,
            },
            hidden_proj: Dense {
                name: self.full(&format!("{name}.w_hh")),
                w: w_hh,
                out: 3 * hidden,
                inp: hidden,
                lora: None,
            },
            b_ih,
            b_hh,
            hidden,
        }
    }
}

/// Low-rank update `scaling · B · A` attached to a weight matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoraPair {
    /// `[rank, in]`
    pub a: ParamId,
    /// `[out, rank]`
    pub b: ParamId,
    pub rank: usize,
    pub scaling: f64,
    pub merged: bool,
}

impl LoraPair {
    fn delta(&self, bind: &Binder) -> Tensor {
        bind.param(self.b).matmul(&bind.param(self.a)).scale(self.scaling)
    }

    fn delta_value(&self, store: &ParamStore) -> Array2<f64> {
        let a = store.value(self.a).view().into_dimensionality::<Ix2>().unwrap();
        let b = store.value(self.b).view().into_dimensionality::<Ix2>().unwrap();
        b.dot(&a) * self.scaling
    }
}

/// A weight matrix that can carry a low-rank adapter.
pub trait LoraTarget {
    fn target_name(&self) -> &str;
    /// `(out, in)`
    fn dims(&self) -> (usize, usize);
    fn lora(&self) -> Option<&LoraPair>;
    fn lora_mut(&mut self) -> &mut Option<LoraPair>;
    /// Current base weight as an `[out, in]` matrix.
    fn base_matrix(&self, store: &ParamStore) -> Array2<f64>;
    /// Rewrites the base parameters so that [`LoraTarget::base_matrix`] equals `m`.
    fn set_base_matrix(&self, store: &mut ParamStore, m: &Array2<f64>);

    /// Folds the adapter into the base weights.
    fn merge(&mut self, store: &mut ParamStore) -> crate::Result<()> {
        let pair = self
            .lora()
            .cloned()
            .ok_or_else(|| crate::Error::Lora(format!("{} has no adapter", self.target_name())))?;
        if pair.merged {
            return Err(crate::Error::Lora(format!(
                "adapter on {} is already merged",
                self.target_name()
            )));
        }
        let m = self.base_matrix(store) + pair.delta_value(store);
        self.set_base_matrix(store, &m);
        self.lora_mut().as_mut().unwrap().merged = true;
        Ok(())
    }
}

fn wn(v: &Tensor, g: &Tensor, norm_axes: &[usize]) -> Tensor {
    let mut sq = v.square();
    for &ax in norm_axes.iter().rev() {
        sq = sq.sum_axis(ax, true);
    }
    v.mul(&g.div(&sq.sqrt()))
}

fn wn_value(v: &Array, g: &Array, norm_axes: &[usize]) -> Array {
    let mut sq = v.mapv(|x| x * x);
    for &ax in norm_axes.iter().rev() {
        sq = sq.sum_axis(Axis(ax)).insert_axis(Axis(ax));
    }
    let scale = g / &sq.mapv(f64::sqrt);
    v * &scale
}

fn row_norms(m: &Array2<f64>) -> Array2<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r).sqrt()).insert_axis(Axis(1))
}

/// Weight-normalised 1-D convolution: `w = g · v / ‖v‖` per output channel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WnConv1d {
    pub name: String,
    pub v: ParamId,
    pub g: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: (usize, usize),
    pub lora: Option<LoraPair>,
}

impl WnConv1d {
    pub fn weight(&self, bind: &Binder) -> Tensor {
        let w = wn(&bind.param(self.v), &bind.param(self.g), &[1, 2]);
        match &self.lora {
            Some(p) if !p.merged => w.add(&p.delta(bind).reshape(&[self.cout, self.cin, 1])),
            _ => w,
        }
    }

    pub fn forward(&self, bind: &Binder, x: &Tensor) -> Tensor {
        x.conv1d(&self.weight(bind), Some(&bind.param(self.b)), self.stride, self.pad.0, self.pad.1)
    }
}

impl LoraTarget for WnConv1d {
    fn target_name(&self) -> &str {
        &self.name
    }
    fn dims(&self) -> (usize, usize) {
        (self.cout, self.cin)
    }
    fn lora(&self) -> Option<&LoraPair> {
        self.lora.as_ref()
    }
    fn lora_mut(&mut self) -> &mut Option<LoraPair> {
        &mut self.lora
    }
    fn base_matrix(&self, store: &ParamStore) -> Array2<f64> {
        assert_eq!(self.kernel, 1, "only pointwise convolutions are adaptable");
        wn_value(store.value(self.v), store.value(self.g), &[1, 2])
            .into_shape_with_order((self.cout, self.cin))
            .unwrap()
    }
    fn set_base_matrix(&self, store: &mut ParamStore, m: &Array2<f64>) {
        store.set(self.g, row_norms(m).into_shape_with_order(IxDyn(&[self.cout, 1, 1])).unwrap());
        store.set(self.v, m.clone().into_shape_with_order(IxDyn(&[self.cout, self.cin, 1])).unwrap());
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WnConvTranspose1d {
    pub v: ParamId,
    pub g: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: (usize, usize),
}

impl WnConvTranspose1d {
    pub fn forward(&self, bind: &Binder, x: &Tensor) -> Tensor {
        let w = wn(&bind.param(self.v), &bind.param(self.g), &[0, 2]);
        x.conv_transpose1d(&w, Some(&bind.param(self.b)), self.stride, self.pad.0, self.pad.1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WnConv2d {
    pub v: ParamId,
    pub g: ParamId,
    pub b: ParamId,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl WnConv2d {
    pub fn forward(&self, bind: &Binder, x: &Tensor) -> Tensor {
        let w = wn(&bind.param(self.v), &bind.param(self.g), &[1, 2, 3]);
        x.conv2d(&w, Some(&bind.param(self.b)), self.stride, self.padding)
    }
}

/// Weight-normalised affine map on the last axis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WnLinear {
    pub name: String,
    pub v: ParamId,
    pub g: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
    pub lora: Option<LoraPair>,
}

impl WnLinear {
    pub fn weight(&self, bind: &Binder) -> Tensor {
        let w = wn(&bind.param(self.v), &bind.param(self.g), &[1]);
        match &self.lora {
            Some(p) if !p.merged => w.add(&p.delta(bind)),
            _ => w,
        }
    }

    /// `x: [.., in]` (rank 2 or 3).
    pub fn forward(&self, bind: &Binder, x: &Tensor) -> Tensor {
        x.matmul(&self.weight(bind).t()).add(&bind.param(self.b))
    }
}

impl LoraTarget for WnLinear {
    fn target_name(&self) -> &str {
        &self.name
    }
    fn dims(&self) -> (usize, usize) {
        (self.out, self.inp)
    }
    fn lora(&self) -> Option<&LoraPair> {
        self.lora.as_ref()
    }
    fn lora_mut(&mut self) -> &mut Option<LoraPair> {
        &mut self.lora
    }
    fn base_matrix(&self, store: &ParamStore) -> Array2<f64> {
        wn_value(store.value(self.v), store.value(self.g), &[1])
            .into_dimensionality::<Ix2>()
            .unwrap()
    }
    fn set_base_matrix(&self, store: &mut ParamStore, m: &Array2<f64>) {
        store.set(self.g, row_norms(m).into_dyn());
        store.set(self.v, m.clone().into_dyn());
    }
}

/// Plain (not weight-normalised) matrix, used inside recurrent cells.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    pub name: String,
    pub w: ParamId,
    pub out: usize,
    pub inp: usize,
    pub lora: Option<LoraPair>,
}

impl Dense {
    pub fn weight(&self, bind: &Binder) -> Tensor {
        let w = bind.param(self.w);
        match &self.lora {
            Some(p) if !p.merged => w.add(&p.delta(bind)),
            _ => w,
        }
    }
}

impl LoraTarget for Dense {
    fn target_name(&self) -> &str {
        &self.name
    }
    fn dims(&self) -> (usize, usize) {
        (self.out, self.inp)
    }
    fn lora(&self) -> Option<&LoraPair> {
        self.lora.as_ref()
    }
    fn lora_mut(&mut self) -> &mut Option<LoraPair> {
        &mut self.lora
    }
    fn base_matrix(&self, store: &ParamStore) -> Array2<f64> {
        store.value(self.w).clone().into_dimensionality::<Ix2>().unwrap()
    }
    fn set_base_matrix(&self, store: &mut ParamStore, m: &Array2<f64>) {
        store.set(self.w, m.clone().into_dyn());
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PRelu {
    pub alpha: ParamId,
}

impl PRelu {
    pub fn forward(&self, bind: &Binder, x: &Tensor) -> Tensor {
        x.prelu(&bind.param(self.alpha))
    }
}

/// Single-layer gated recurrent unit over `[batch, channels, time]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gru {
    pub input_proj: Dense,
    pub hidden_proj: Dense,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn forward(&self, bind: &Binder, x: &Tensor) -> Tensor {
        let (batch, _, steps) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h3 = 3 * self.hidden;
        let hsz = self.hidden;
        let xt = x.permute(&[0, 2, 1]);
        let gi = xt
            .matmul(&self.input_proj.weight(bind).t())
            .add(&bind.param(self.b_ih));
        let whh_t = self.hidden_proj.weight(bind).t();
        let b_hh = bind.param(self.b_hh);
        let mut h = Tensor::zeros(&[batch, hsz]);
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gi_t = gi.narrow(1, t, 1).reshape(&[batch, h3]);
            let gh = h.matmul(&whh_t).add(&b_hh);
            let r = gi_t.narrow(1, 0, hsz).add(&gh.narrow(1, 0, hsz)).sigmoid();
            let z = gi_t
                .narrow(1, hsz, hsz)
                .add(&gh.narrow(1, hsz, hsz))
                .sigmoid();
            let n = gi_t
                .narrow(1, 2 * hsz, hsz)
                .add(&r.mul(&gh.narrow(1, 2 * hsz, hsz)))
                .tanh();
            h = n.add(&z.mul(&h.sub(&n)));
            outs.push(h.clone());
        }
        Tensor::stack(&outs, 2)
    }
}
