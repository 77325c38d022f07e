//! Parameter storage, weight-normalised layers, recurrent cells and optimizers.

mod layers;
mod optim;
mod params;

pub use layers::{
    Builder, Dense, Gru, LoraPair, LoraTarget, PRelu, WnConv1d, WnConv2d, WnConvTranspose1d,
    WnLinear,
};
pub use optim::{clip_grad_norm, grad_norm, AdamW};
pub use params::{Binder, Group, Init, Param, ParamId, ParamStore};
