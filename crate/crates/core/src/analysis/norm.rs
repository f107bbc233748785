//! Local spectral norms of Jacobians by Lanczos bidiagonalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{DecoderKind, DecoderStage, Model};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerConfig {
    pub max_iters: usize,
    /// Stop once the relative change of σ between iterations is at most this.
    pub tol: f64,
    pub seed: u64,
    /// Central-difference step for Jacobian-vector products.
    pub fd_step: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
            fd_step: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Relative change of σ at the last iteration.
    pub residual: f64,
}

fn norm(parts: &[Tensor<f64>]) -> f64 {
    parts.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt()
}

fn scaled(parts: &[Tensor<f64>], s: f64) -> Vec<Tensor<f64>> {
    parts.iter().map(|t| t.map(|v| v * s)).collect()
}

/// Estimates the largest singular value of the Jacobian of `f` at `x0`,
/// where `f` may take several tensor inputs (treated as one concatenated
/// vector) and returns one tensor.
///
/// Each iteration takes one central-difference Jacobian-vector product and
/// one reverse-mode vector-Jacobian product. The start vector is drawn from
/// `cfg.seed`. Non-convergence is reported through `converged`; `tol` bounds
/// the relative change of the estimate between iterations.
pub fn jacobian_spectral_norm_multi<F>(f: F, x0: &[Tensor<f64>], cfg: &PowerConfig) -> Result<NormEstimate>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if x0.is_empty() {
        return Err(Error::InvalidArgument("spectral norm of a map with no inputs".into()));
    }
    if !(cfg.fd_step > 0.0) || cfg.max_iters == 0 {
        return Err(Error::InvalidArgument("power iteration needs fd_step > 0 and max_iters > 0".into()));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let y = f(&mut g, &vars)?;
        let out = g.value(y).clone();
        if !out.all_finite() {
            return Err(Error::NonFinite("map output during power iteration".into()));
        }
        Ok(out)
    };
    let jvp = |v: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let h = cfg.fd_step;
        let shift = |sign: f64| -> Vec<Tensor<f64>> {
            x0.iter()
                .zip(v)
                .map(|(x, d)| x.zip_map(d, |a, b| a + sign * h * b).expect("same shape"))
                .collect()
        };
        let up = eval(&shift(1.0))?;
        let down = eval(&shift(-1.0))?;
        up.zip_map(&down, |a, b| (a - b) / (2.0 * h))
    };
    let vjp = |u: &Tensor<f64>| -> Result<Vec<Tensor<f64>>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = x0.iter().map(|x| g.input(x.clone())).collect();
        let y = f(&mut g, &vars)?;
        g.backward_with(y, u.clone())?;
        Ok(vars
            .iter()
            .zip(x0)
            .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect())
    };

    // Golub-Kahan-Lanczos bidiagonalization with full reorthogonalization.
    // Plain power iteration stalls when the top singular values cluster,
    // which is the usual case for random dense maps.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start: Vec<Tensor<f64>> = x0.iter().map(|x| Tensor::randn(x.shape(), 1.0, &mut rng)).collect();
    let mut vs = vec![scaled(&start, 1.0 / norm(&start))];
    let mut us: Vec<Tensor<f64>> = Vec::new();
    let mut bidiag: Vec<f64> = Vec::new();

    let mut sigma = 0.0f64;
    let mut residual = f64::INFINITY;
    let mut p = jvp(&vs[0])?;
    for it in 1..=cfg.max_iters {
        for u in &us {
            let c = u.dot(&p)?;
            p = p.zip_map(u, |a, b| a - c * b)?;
        }
        let alpha = p.norm_l2();
        bidiag.push(alpha);
        let next = top_singular_value(&bidiag);
        residual = if next > 0.0 { (next - sigma).abs() / next } else { 0.0 };
        sigma = next;
        if sigma == 0.0 {
            return Ok(NormEstimate {
                sigma,
                iterations: it,
                converged: true,
                residual: 0.0,
            });
        }
        // A vanishing alpha or beta means the Krylov space is exhausted and
        // the estimate is exact.
        let exhausted = alpha <= 1e-13 * sigma;
        if exhausted || (it > 1 && residual <= cfg.tol) {
            return Ok(NormEstimate {
                sigma,
                iterations: it,
                converged: true,
                residual: if exhausted { 0.0 } else { residual },
            });
        }
        let u = p.map(|v| v / alpha);
        let mut w = vjp(&u)?;
        us.push(u);
        for v in &vs {
            let c: f64 = w.iter().zip(v).map(|(a, b)| a.dot(b).expect("same shape")).sum();
            w = w.iter().zip(v).map(|(a, b)| a.zip_map(b, |x, y| x - c * y).expect("same shape")).collect();
        }
        let beta = norm(&w);
        if beta <= 1e-13 * sigma {
            return Ok(NormEstimate {
                sigma,
                iterations: it,
                converged: true,
                residual: 0.0,
            });
        }
        bidiag.push(beta);
        let v = scaled(&w, 1.0 / beta);
        let av = jvp(&v)?;
        let last = us.last().expect("pushed above");
        p = av.zip_map(last, |a, b| a - beta * b)?;
        vs.push(v);
    }
    Ok(NormEstimate {
        sigma,
        iterations: cfg.max_iters,
        converged: residual <= cfg.tol,
        residual,
    })
}

/// Largest singular value of the upper bidiagonal matrix with entries
/// `alpha_1, beta_1, alpha_2, beta_2, ...` read along the diagonal and
/// superdiagonal. This equals the largest eigenvalue of the symmetric
/// tridiagonal matrix with zero diagonal and these entries off the diagonal,
/// found by Sturm-count bisection.
fn top_singular_value(entries: &[f64]) -> f64 {
    let n = entries.len() + 1;
    let off = |i: usize| if i < entries.len() { entries[i] } else { 0.0 };
    let bound = (0..n).map(|i| off(i) + if i > 0 { off(i - 1) } else { 0.0 }).fold(0.0, f64::max);
    if bound == 0.0 {
        return 0.0;
    }
    // Number of eigenvalues strictly greater than x.
    let above = |x: f64| {
        let mut count = 0;
        let mut d = 1.0f64;
        for i in 0..n {
            let e = if i > 0 { off(i - 1) } else { 0.0 };
            d = -x - if i > 0 { e * e / d } else { 0.0 };
            if d == 0.0 {
                d = -f64::EPSILON * bound;
            }
            if d < 0.0 {
                count += 1;
            }
        }
        n - count
    };
    let (mut lo, mut hi) = (0.0, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if above(mid) > 0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Single-input form of [`jacobian_spectral_norm_multi`].
pub fn jacobian_spectral_norm<F>(f: F, x0: &Tensor<f64>, cfg: &PowerConfig) -> Result<NormEstimate>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    jacobian_spectral_norm_multi(|g, xs| f(g, xs[0]), std::slice::from_ref(x0), cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBound {
    /// Local norm of `x_e ↦ x_e − stage_k(x_e, x_d)` for `k = 1..=L`.
    pub eps: Vec<NormEstimate>,
    /// Local norm of the whole decoder as a function of all skip features.
    pub sigma_total: NormEstimate,
    /// `Π (1 + eps_k)`.
    pub bound: f64,
    pub slack: f64,
    pub pass: bool,
    /// Whether every `eps_k < 1`.
    pub contraction: bool,
}

/// Compares the decoder's local norm with the product bound built from each
/// stage's suppression norm, at the linearization point reached by `x`.
///
/// Each stage is measured with its deeper input frozen at the value it takes
/// in the forward pass of `x`; the whole decoder is measured with the
/// bottleneck frozen.
pub fn stage_bound_check(model: &Model<f64>, x: &Tensor<f64>, cfg: &PowerConfig, slack: f64) -> Result<StageBound> {
    if model.spec.decoder != DecoderKind::Super {
        return Err(Error::InvalidArgument("stage_bound_check needs a SUPER decoder".into()));
    }
    let depth = model.spec.depth;
    let (skips, deeper, bottleneck) = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tr = model.forward_traced(&mut g, xv)?;
        let skips: Vec<Tensor<f64>> = tr.skips.iter().map(|&v| g.value(v).clone()).collect();
        let deeper: Vec<Tensor<f64>> = (1..=depth)
            .map(|k| g.value(if k == depth { tr.bottleneck } else { tr.decoded[k] }).clone())
            .collect();
        (skips, deeper, g.value(tr.bottleneck).clone())
    };

    let mut eps = Vec::with_capacity(depth);
    for k in 1..=depth {
        let stage = match model.decoder_stage(k) {
            DecoderStage::Super(b) => b,
            DecoderStage::Baseline(_) => unreachable!("checked decoder kind"),
        };
        let xd = &deeper[k - 1];
        let est = jacobian_spectral_norm(
            |g, xe| {
                let d = g.constant(xd.clone());
                let out = stage.forward(g, &model.store, xe, d)?;
                g.sub(xe, out)
            },
            &skips[k - 1],
            cfg,
        )?;
        eps.push(est);
    }

    let sigma_total = jacobian_spectral_norm_multi(
        |g, xs| {
            let b = g.constant(bottleneck.clone());
            Ok(model.decode(g, xs, b)?[0])
        },
        &skips,
        cfg,
    )?;

    let bound: f64 = eps.iter().map(|e| 1.0 + e.sigma).product();
    Ok(StageBound {
        pass: sigma_total.sigma <= bound * (1.0 + slack),
        contraction: eps.iter().all(|e| e.sigma < 1.0),
        eps,
        sigma_total,
        bound,
        slack,
    })
}
