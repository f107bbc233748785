//! Reconstruction residuals, local Jacobian norms, the multi-stage norm
//! bound and MAC accounting.

mod macs;
mod norm;

pub use macs::{
    channel_linear_macs, conv_macs, count_macs, regime_comparison, MacReport, MacRow, RegimeComparison,
    BILINEAR_PER_OUTPUT, HAAR_PER_OUTPUT, POINTWISE_PER_OUTPUT, POOL_PER_INPUT,
};
pub use norm::{
    jacobian_spectral_norm, jacobian_spectral_norm_multi, stage_bound_check, NormEstimate, PowerConfig, StageBound,
};

use serde::{Deserialize, Serialize};

use crate::blocks::Model;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::wavelet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrReport {
    pub max_abs_residual: f64,
    pub pass: bool,
}

/// `‖idwt(dwt(x)) − x‖∞`, passing iff at most `tol`.
pub fn verify_pr<T: Scalar>(x: &Tensor<T>, tol: f64) -> Result<PrReport> {
    let back = wavelet::synthesis_stacked(&wavelet::analysis_stacked(x)?)?;
    let r = back.max_abs_diff(x)?.as_f64();
    Ok(PrReport {
        max_abs_residual: r,
        pass: r <= tol,
    })
}

/// Realized per-stage suppression `‖out_k − skip_k‖₂ / ‖skip_k‖₂`, index
/// `k − 1` for decoder stage `k`.
pub fn suppression_residual<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let tr = model.forward_traced(&mut g, xv)?;
    tr.skips
        .iter()
        .zip(&tr.decoded)
        .enumerate()
        .map(|(i, (&s, &d))| {
            let skip = g.value(s);
            let denom = skip.norm_l2().as_f64();
            if denom == 0.0 {
                return Err(Error::InvalidArgument(format!("zero-norm skip feature at stage {}", i + 1)));
            }
            let diff = g.value(d).zip_map(skip, |a, b| a - b)?;
            Ok(diff.norm_l2().as_f64() / denom)
        })
        .collect()
}

#[cfg(test)]
mod tests;
