//! A small reverse-mode automatic differentiation engine over `f64` arrays.
//!
//! Everything trainable in the crate (networks, discriminators, adapters,
//! losses) is expressed with [`Tensor`] operations. Values are 64-bit so the
//! same graphs can be verified against central finite differences.

mod conv;
pub mod gradcheck;
mod signal;
mod tensor;

pub use tensor::{reduce_to_shape, sigmoid, Array, Gradients, Tensor};
