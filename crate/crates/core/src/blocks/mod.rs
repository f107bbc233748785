//! Network building blocks: CBAM, DoubleConv, the SUPER decoder stage,
//! the bilinear baseline decoder, encoder stages and a small U-Net.

pub mod checkpoint;
mod decoder;
mod layers;
mod model;
mod params;

pub use decoder::{BaselineDecoder, EncoderStage, Fusion, SuperBlock, SuperBlockConfig, SuperTrace};
pub use layers::{Cbam, CbamSpec, Conv, DoubleConv, DoubleConvSpec, ParamBuilder};
pub use model::{DecoderKind, DecoderStage, HeadKind, Model, ModelSpec, ModelTrace};
pub use params::{grad_check_params, Init, ParamId, ParamStore, Parameter};

#[cfg(test)]
mod tests;
