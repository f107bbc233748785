//! Wavelet-domain decoder blocks with suppressed perfect reconstruction.
//!
//! The crate bundles a small dense-tensor engine with reverse-mode
//! differentiation ([`tensor`]), an orthonormal 2-D Haar filter bank
//! ([`wavelet`]), the decoder/encoder building blocks and a toy U-Net
//! ([`blocks`]), numerical verification tooling ([`analysis`]) and a
//! synthetic-data experiment harness with its CLI ([`harness`]).

pub mod analysis;
pub mod blocks;
pub mod error;
pub mod harness;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Shape, Tensor, Var};
