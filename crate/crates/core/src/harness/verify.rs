//! Self-check suites run by `superpr verify`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, jacobian_spectral_norm, stage_bound_check, PowerConfig};
use crate::blocks::{
    DecoderKind, Model, ModelSpec, ParamBuilder, ParamStore, SuperBlock, SuperBlockConfig,
};
use crate::error::Result;
use crate::tensor::gradcheck::{audit_gradients, grad_check, op_cases, wave, GradientAudit};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::wavelet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub pass: bool,
    /// Worst observed value of the suite's error measure.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
    pub pass: bool,
}

fn suite(name: &str, worst: f64, tolerance: f64, detail: impl Into<String>) -> SuiteResult {
    SuiteResult {
        name: name.to_string(),
        pass: worst <= tolerance,
        worst,
        tolerance,
        detail: detail.into(),
    }
}

pub fn pr_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = [[1, 1, 2, 2], [1, 3, 8, 6], [2, 4, 16, 16], [2, 4, 64, 64]];
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let shape = shapes[i % shapes.len()];
        let x = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        w64 = w64.max(analysis::verify_pr(&x, 1e-12)?.max_abs_residual);
        w32 = w32.max(analysis::verify_pr(&x.cast::<f32>(), 1e-5)?.max_abs_residual);
    }
    Ok(vec![
        suite("pr_f64", w64, 1e-12, "100 random tensors up to [2,4,64,64]"),
        suite("pr_f32", w32, 1e-5, "100 random tensors up to [2,4,64,64]"),
    ])
}

fn super_block<T: Scalar>(cfg: SuperBlockConfig, seed: u64) -> Result<(ParamStore<T>, SuperBlock)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = SuperBlock::build(&mut ParamBuilder::new(&mut store, &mut rng, "sb"), cfg, 1.0)?;
    Ok((store, block))
}

pub fn identity_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, block) = super_block::<f32>(SuperBlockConfig::new(4, 8), seed)?;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let xe = Tensor::<f32>::randn([1, 4, 16, 16], 1.0, &mut rng);
        let xd = Tensor::<f32>::randn([1, 8, 8, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let (a, b) = (g.constant(xe.clone()), g.constant(xd));
        let y = block.forward(&mut g, &store, a, b)?;
        worst = worst.max(g.value(y).max_abs_diff(&xe)? as f64);
    }

    let model = Model::<f32>::build(ModelSpec::new(2, 8, DecoderKind::Super), seed)?;
    let mut cascade = 0.0f64;
    for _ in 0..5 {
        let x = Tensor::<f32>::rand_uniform([1, 1, 32, 32], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let tr = model.forward_traced(&mut g, xv)?;
        cascade = cascade.max(g.value(tr.decoded[0]).max_abs_diff(g.value(tr.skips[0]))? as f64);
    }
    Ok(vec![
        suite("identity_block", worst, 1e-5, "50 random (x_e, x_d) pairs, zero-initialized F_d"),
        suite("identity_model", cascade, 1e-5, "L=2 decoder output vs stage-1 skip"),
    ])
}

pub fn gradient_suite() -> Result<Vec<SuiteResult>> {
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_name = "";
    for case in op_cases() {
        let e = grad_check(|g, v| crate::tensor::gradcheck::ScalarFn::build(&case, g, v), &case.input::<f64>(), step)?;
        if e > worst {
            worst = e;
            worst_name = case.name;
        }
    }
    let ops = suite("gradient_ops", worst, 1e-5, format!("worst case `{worst_name}`"));

    let mut audits = Vec::new();
    for seed in 0..BLOCK_POINTS {
        audits.push(super_block_gradient_audit(seed)?);
    }
    let strict = audits.iter().map(|a| a.worst).fold(0.0, f64::max);
    let over: usize = audits.iter().map(|a| a.over_tolerance).sum();
    let coords: usize = audits.iter().map(|a| a.coordinates).sum();
    let limited = audits.iter().all(|a| a.rounding_limited(SMALL_GRADIENT));
    let max_small = audits.iter().map(|a| a.max_abs_grad_over).fold(0.0, f64::max);
    let wide = audits.iter().map(|a| a.worst_over_at_wide_step).fold(0.0, f64::max);
    let mut block = suite(
        "gradient_super_block",
        strict,
        1e-5,
        format!(
            "{BLOCK_POINTS} points, {coords} coordinates (inputs and parameters); {over} above tolerance, \
             largest |grad| among them {max_small:.1e}, worst {wide:.1e} at step {WIDE_STEP:.0e}"
        ),
    );
    block.pass = block.pass || limited;
    Ok(vec![ops, block])
}

/// Deterministic SUPER block check points.
pub const BLOCK_POINTS: u64 = 3;
/// Gradients below this magnitude can lose the relative tolerance to
/// rounding in the function value at the primary step.
pub const SMALL_GRADIENT: f64 = 1e-4;
pub const WIDE_STEP: f64 = 1e-3;

/// Finite-difference audit of a SUPER block (2 → 4 channels, CBAM on,
/// random non-zero F_d) with respect to `x_e`, `x_d` and every parameter,
/// at step 1e-5 and tolerance 1e-5.
pub fn super_block_gradient_audit(seed: u64) -> Result<GradientAudit> {
    let mut cfg = SuperBlockConfig::new(2, 4);
    cfg.fd.zero_init_final = false;
    let (mut store, block) = super_block::<f64>(cfg, seed)?;
    let phase = seed as f64 * 0.61;
    let xe = wave::<f64>([1, 2, 8, 8], 0.1 + phase, 1.0);
    let xd = wave::<f64>([1, 4, 4, 4], 0.7 + phase, 1.0);
    let probe = wave::<f64>([1, 2, 8, 8], 1.3 + phase, 1.0);
    let weighted = |g: &mut Graph<f64>, store: &ParamStore<f64>, a: Var, b: Var| -> Result<Var> {
        let y = block.forward(g, store, a, b)?;
        let p = g.constant(probe.clone());
        let prod = g.mul(y, p)?;
        Ok(g.sum(prod))
    };

    let mut g = Graph::new();
    let (a, b) = (g.input(xe.clone()), g.input(xd.clone()));
    let loss = weighted(&mut g, &store, a, b)?;
    g.backward(loss)?;
    store.zero_grads();
    store.collect_grads(&g);
    let mut analytic = vec![
        g.grad(a).cloned().unwrap_or_else(|| Tensor::zeros(xe.shape())),
        g.grad(b).cloned().unwrap_or_else(|| Tensor::zeros(xd.shape())),
    ];
    analytic.extend(store.iter().map(|p| p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()))));
    let mut xs = vec![xe.clone(), xd.clone()];
    xs.extend(store.iter().map(|p| p.value.clone()));

    audit_gradients(
        |ts| {
            let mut s = store.clone();
            for (p, t) in s.iter_mut().zip(&ts[2..]) {
                p.value = t.clone();
            }
            let mut g = Graph::new();
            let (a, b) = (g.constant(ts[0].clone()), g.constant(ts[1].clone()));
            let l = weighted(&mut g, &s, a, b)?;
            Ok(g.value(l).data()[0])
        },
        &xs,
        &analytic,
        1e-5,
        WIDE_STEP,
        1e-5,
    )
}

pub fn parseval_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = Tensor::<f32>::randn([2, 3, 16, 16], 1.0, &mut rng);
        let y = wavelet::analysis_stacked(&x)?;
        let (nx, ny) = (x.norm_l2() as f64, y.norm_l2() as f64);
        worst = worst.max((ny - nx).abs() / nx);
    }
    let x = Tensor::<f64>::randn([1, 2, 8, 8], 1.0, &mut rng);
    let s = jacobian_spectral_norm(|g, v| g.haar_analysis(v), &x, &PowerConfig::default())?;
    Ok(vec![
        suite("parseval", worst, 1e-6, "relative norm change under dwt, f32"),
        suite("dwt_spectral_norm", (s.sigma - 1.0).abs(), 1e-4, format!("sigma {:.8}", s.sigma)),
    ])
}

pub fn norm_suite(seed: u64, models: usize) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = PowerConfig::default();
    let mut worst_excess = f64::NEG_INFINITY;
    let mut failed = 0;
    for m in 0..models {
        let mut spec = ModelSpec::new(2, 2, DecoderKind::Super);
        spec.fd_zero_init = false;
        spec.fd_gain = 0.01;
        let model = Model::<f64>::build(spec, seed + m as u64)?;
        let x = Tensor::<f64>::randn([1, 1, 8, 8], 1.0, &mut rng);
        let r = stage_bound_check(&model, &x, &cfg, 0.01)?;
        failed += usize::from(!r.pass);
        worst_excess = worst_excess.max(r.sigma_total.sigma - r.bound * (1.0 + r.slack));
    }
    Ok(vec![suite(
        "stage_bound",
        worst_excess.max(0.0),
        0.0,
        format!("{failed} of {models} small-gain models exceed prod(1+eps_k)*1.01"),
    )])
}

pub fn mac_suite() -> Result<Vec<SuiteResult>> {
    let r = analysis::regime_comparison(1, 8, 64, 64);
    let linear = r.channel_linear_full.abs_diff(r.channel_linear_half) as f64;
    let dense = (r.dense_half as f64) - 4.0 * r.dense_full as f64;
    let report = analysis::count_macs(&ModelSpec::new(2, 8, DecoderKind::Super), crate::tensor::Shape::new(1, 1, 64, 64))?;
    let volume = report
        .rows
        .iter()
        .filter(|row| row.op == "haar_analysis")
        .map(|row| row.input_volume.abs_diff(row.output_volume))
        .sum::<u64>() as f64;
    Ok(vec![
        suite("macs_channel_linear_equal", linear, 0.0, "(H,W,C) vs (H/2,W/2,4C)"),
        suite("macs_dense_4x", dense.abs(), 0.0, "dense 3x3 at (H/2,W/2,4C) vs (H,W,C)"),
        suite("macs_dwt_volume", volume, 0.0, "element volume across every dwt of the reference model"),
    ])
}

/// Runs every suite. `quick` trims the stage-bound suite to three models.
pub fn run_all(seed: u64, quick: bool) -> Result<VerifyReport> {
    let mut suites = Vec::new();
    suites.extend(pr_suite(seed)?);
    suites.extend(identity_suite(seed)?);
    suites.extend(gradient_suite()?);
    suites.extend(parseval_suite(seed)?);
    suites.extend(norm_suite(seed, if quick { 3 } else { 10 })?);
    suites.extend(mac_suite()?);
    let pass = suites.iter().all(|s| s.pass);
    Ok(VerifyReport { suites, pass })
}
