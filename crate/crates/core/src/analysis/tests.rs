use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::blocks::{DecoderKind, Fusion, HeadKind, ModelSpec};
use crate::tensor::Shape;

#[test]
fn pr_passes_in_both_precisions() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f64>::randn([2, 3, 16, 16], 1.0, &mut rng);
    assert!(verify_pr(&x, 1e-12).unwrap().pass);
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::randn([1, 2, 8, 8], 1.0, &mut rng);
        let r = verify_pr(&x, 1e-5).unwrap();
        assert!(r.pass);
        worst = worst.max(r.max_abs_residual);
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn corrupted_hh_band_leaves_its_synthesis_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn([1, 1, 4, 4], 1.0, &mut rng);
    let mut bands = wavelet::dwt_haar(&x).unwrap();
    let delta = 0.3;
    let v = bands.hh.at(0, 0, 1, 0);
    bands.hh.set(0, 0, 1, 0, v + delta);
    let back = wavelet::idwt_haar(&bands).unwrap();
    // one HH coefficient spreads ±δ/2 over its 2×2 block
    let r = back.max_abs_diff(&x).unwrap();
    assert!((r - delta / 2.0).abs() < 1e-12);
    assert!(r > 1e-12);
}

#[test]
fn pr_rejects_odd_extent() {
    assert!(matches!(
        verify_pr(&Tensor::<f32>::zeros([1, 1, 3, 4]), 1e-5),
        Err(Error::OddExtent { .. })
    ));
}

fn cfg() -> PowerConfig {
    PowerConfig::default()
}

#[test]
fn norms_of_isometries_and_scalings() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f64>::randn([1, 2, 8, 8], 1.0, &mut rng);
    let id = jacobian_spectral_norm(|_, v| Ok(v), &x, &cfg()).unwrap();
    assert!((id.sigma - 1.0).abs() <= 1e-6 && id.converged);
    let w = jacobian_spectral_norm(|g, v| g.haar_analysis(v), &x, &cfg()).unwrap();
    assert!((w.sigma - 1.0).abs() <= 1e-6);
    let s = jacobian_spectral_norm(|g, v| Ok(g.scale(v, -0.7)), &x, &cfg()).unwrap();
    assert!((s.sigma - 0.7).abs() <= 1e-6);
}

fn dense_map(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn([rows, cols, 1, 1], 1.0 / (cols as f64).sqrt(), &mut rng)
}

fn svd_max(w: &Tensor<f64>) -> f64 {
    let s = w.shape();
    let m = DMatrix::from_row_slice(s.b(), s.c(), w.data());
    m.singular_values().max()
}

fn power_norm(w: &Tensor<f64>) -> NormEstimate {
    let x = Tensor::zeros([1, w.shape().c(), 1, 1]);
    jacobian_spectral_norm(
        |g, v| {
            let wv = g.constant(w.clone());
            g.conv2d(v, wv, None, 1, 0)
        },
        &x,
        &cfg(),
    )
    .unwrap()
}

#[test]
fn linear_map_matches_dense_svd() {
    for seed in 0..4 {
        let w = dense_map(16, 16, seed);
        let est = power_norm(&w);
        let oracle = svd_max(&w);
        assert!((est.sigma - oracle).abs() / oracle <= 1e-4, "{} vs {oracle}", est.sigma);
    }
}

#[test]
fn composition_is_submultiplicative() {
    for seed in 0..5 {
        let a = dense_map(12, 10, 100 + seed);
        let b = dense_map(10, 12, 200 + seed);
        let x = Tensor::zeros([1, 12, 1, 1]);
        let comp = jacobian_spectral_norm(
            |g, v| {
                let (wa, wb) = (g.constant(a.clone()), g.constant(b.clone()));
                let h = g.conv2d(v, wb, None, 1, 0)?;
                g.conv2d(h, wa, None, 1, 0)
            },
            &x,
            &cfg(),
        )
        .unwrap();
        let bound = power_norm(&a).sigma * power_norm(&b).sigma;
        assert!(comp.sigma <= bound * (1.0 + 1e-4), "{} > {bound}", comp.sigma);
    }
}

#[test]
fn non_convergence_is_reported() {
    let w = dense_map(16, 16, 9);
    let x = Tensor::zeros([1, 16, 1, 1]);
    let est = jacobian_spectral_norm(
        |g, v| {
            let wv = g.constant(w.clone());
            g.conv2d(v, wv, None, 1, 0)
        },
        &x,
        &PowerConfig {
            max_iters: 2,
            tol: 1e-15,
            ..cfg()
        },
    )
    .unwrap();
    assert!(!est.converged);
    assert!(est.sigma > 0.0);
}

fn small_super(gain: f64, zero: bool) -> ModelSpec {
    let mut spec = ModelSpec::new(2, 2, DecoderKind::Super);
    spec.fd_gain = gain;
    spec.fd_zero_init = zero;
    spec
}

#[test]
fn stage_bound_at_identity() {
    let model = Model::<f64>::build(small_super(1.0, true), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn([1, 1, 8, 8], 1.0, &mut rng);
    let r = stage_bound_check(&model, &x, &cfg(), 0.01).unwrap();
    assert!(r.eps.iter().all(|e| e.sigma < 1e-6));
    assert!((r.sigma_total.sigma - 1.0).abs() < 1e-6);
    assert!(r.pass && r.contraction);
}

#[test]
fn stage_bound_small_gain_passes_large_gain_breaks_contraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn([1, 1, 8, 8], 1.0, &mut rng);
    let small = Model::<f64>::build(small_super(0.01, false), 1).unwrap();
    let r = stage_bound_check(&small, &x, &cfg(), 0.01).unwrap();
    assert!(r.pass && r.contraction, "{r:?}");
    assert!(r.eps.iter().all(|e| e.sigma > 0.0 && e.sigma < 0.1));

    let large = Model::<f64>::build(small_super(100.0, false), 1).unwrap();
    let r = stage_bound_check(&large, &x, &cfg(), 0.01).unwrap();
    assert!(!r.contraction, "{r:?}");
}

#[test]
fn stage_bound_needs_super_decoder() {
    let model = Model::<f64>::build(ModelSpec::new(1, 2, DecoderKind::Baseline), 0).unwrap();
    assert!(stage_bound_check(&model, &Tensor::ones([1, 1, 4, 4]), &cfg(), 0.01).is_err());
}

#[test]
fn mac_params_match_built_models() {
    for decoder in [DecoderKind::Super, DecoderKind::Baseline] {
        for fusion in [Fusion::SumLl, Fusion::Concat] {
            for use_cbam in [true, false] {
                let mut spec = ModelSpec::new(2, 4, decoder);
                spec.fusion = fusion;
                spec.use_cbam = use_cbam;
                spec.head = HeadKind::Residual;
                let report = count_macs(&spec, Shape::new(1, 1, 16, 16)).unwrap();
                let model = Model::<f32>::build(spec, 0).unwrap();
                assert_eq!(report.total_params, model.param_count() as u64);
                assert_eq!(report.total_macs, report.rows.iter().map(|r| r.macs).sum::<u64>());
            }
        }
    }
}

#[test]
fn mac_table_by_hand() {
    // L=1, stem 1, baseline, 4×4 input; counted from the conv formula and
    // the per-element constants one layer at a time.
    let report = count_macs(&ModelSpec::new(1, 1, DecoderKind::Baseline), Shape::new(1, 1, 4, 4)).unwrap();
    assert_eq!(report.macs_with_prefix("enc."), 144 + 16 + 144 + 16 + 16);
    assert_eq!(report.macs_with_prefix("bottleneck"), 72 + 8 + 144 + 8);
    assert_eq!(report.macs_with_prefix("dec."), 128 + 432 + 16 + 144 + 16);
    assert_eq!(report.macs_with_prefix("head"), 16);
    assert_eq!(report.total_macs, 1320);
    assert_eq!(report.total_params, 10 + 10 + 20 + 38 + 28 + 10 + 2);
}

#[test]
fn dwt_conserves_volume_and_regimes_are_exact() {
    let report = count_macs(&ModelSpec::new(2, 8, DecoderKind::Super), Shape::new(1, 1, 64, 64)).unwrap();
    let dwts: Vec<_> = report.rows.iter().filter(|r| r.op.starts_with("haar")).collect();
    assert_eq!(dwts.len(), 4);
    for r in dwts {
        assert_eq!(r.input_volume, r.output_volume);
    }
    let c = regime_comparison(1, 8, 64, 64);
    assert_eq!(c.channel_linear_full, c.channel_linear_half);
    assert_eq!(c.dense_half, 4 * c.dense_full);
}

#[test]
fn csv_has_one_line_per_row_plus_header_and_total() {
    let report = count_macs(&ModelSpec::new(2, 8, DecoderKind::Super), Shape::new(1, 1, 64, 64)).unwrap();
    let csv = report.to_csv_string().unwrap();
    assert_eq!(csv.lines().count(), report.rows.len() + 2);
    assert!(csv.starts_with("name,op,output_shape,macs,params,input_volume,output_volume"));
    assert!(csv.lines().last().unwrap().starts_with(&format!("total,,,{}", report.total_macs)));
}

#[test]
fn suppression_ratios() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::<f32>::rand_uniform([1, 1, 16, 16], 0.0, 1.0, &mut rng);
    let zero = Model::<f32>::build(ModelSpec::new(2, 4, DecoderKind::Super), 0).unwrap();
    assert!(suppression_residual(&zero, &x).unwrap().iter().all(|&r| r <= 1e-6));

    let mut spec = ModelSpec::new(2, 4, DecoderKind::Super);
    spec.fd_zero_init = false;
    let live = Model::<f32>::build(spec, 0).unwrap();
    let r = suppression_residual(&live, &x).unwrap();
    assert!(r.iter().all(|&v| v.is_finite() && v > 0.0), "{r:?}");

    assert!(suppression_residual(&live, &Tensor::zeros([1, 1, 16, 16])).is_err());
}
