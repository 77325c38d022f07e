pub mod adversarial;
pub mod audio;
pub mod autograd;
pub mod degradation;
pub mod demo;
pub mod diffusion;
pub mod error;
pub mod eval;
pub(crate) mod fftcache;
pub mod lora;
pub mod networks;
pub mod nn;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
