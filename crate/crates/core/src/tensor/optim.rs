//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One Adam update of `params` in place. Moments are created lazily on the
/// first call.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("state holds {} moments for {} parameters", state.m.len(), params.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {i}: value {} grad {} moment {}", p.shape(), g.shape(), state.m[i].shape()),
            ));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let corr1 = T::one() - b1.powi(t);
    let corr2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(grad: f64, steps: usize, cfg: &AdamConfig) -> Vec<f64> {
        let mut p = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let g = Tensor::<f64>::full([1, 1, 1, 1], grad);
        let mut state = AdamState::new();
        let mut deltas = Vec::new();
        for _ in 0..steps {
            let before = p.data()[0];
            adam_step(&mut [&mut p], &[&g], &mut state, cfg).unwrap();
            deltas.push(p.data()[0] - before);
        }
        deltas
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::full([1, 2, 2, 2], 0.7);
        let g = Tensor::<f64>::zeros([1, 2, 2, 2]);
        let mut state = AdamState::new();
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::default()).unwrap();
        }
        assert!(p.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let cfg = AdamConfig::default();
        for g in [0.3, -2.0, 1e-4] {
            let d = run(g, 1, &cfg)[0];
            // bias correction makes m̂ = g and v̂ = g² exactly
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((d - expected).abs() < 1e-15, "{d} vs {expected}");
        }
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let cfg = AdamConfig::default();
        let d = run(0.5, 2000, &cfg);
        for &step in &d[1990..] {
            assert!((step.abs() - cfg.lr).abs() < 1e-9);
            assert!(step < 0.0);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let g = Tensor::<f32>::zeros([1, 1, 2, 1]);
        let mut state = AdamState::new();
        assert!(adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::default()).is_err());
    }
}
