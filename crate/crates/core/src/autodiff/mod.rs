//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Shapes are always explicit: nothing broadcasts implicitly, and every
//! binary op checks its operands. Any op producing NaN or infinity fails
//! with [`Error::NonFinite`](crate::Error::NonFinite).

mod adam;
pub mod gradcheck;
pub mod kernels;
mod spectral;
mod tape;
mod tensor;

pub use adam::{clip_grad_norm, AdamState, DEFAULT_LR};
pub use spectral::{rayleigh_sigma, SpectralNormState};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
