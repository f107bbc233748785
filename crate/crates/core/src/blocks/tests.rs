use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::{Graph, Scalar, Shape, Tensor};
use crate::wavelet;

fn super_block<T: Scalar>(cfg: SuperBlockConfig, seed: u64) -> (ParamStore<T>, SuperBlock) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = SuperBlock::build(&mut ParamBuilder::new(&mut store, &mut rng, "sb"), cfg, 1.0).unwrap();
    (store, block)
}

fn run_super<T: Scalar>(store: &ParamStore<T>, block: &SuperBlock, xe: &Tensor<T>, xd: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(xe.clone()), g.constant(xd.clone()));
    let y = block.forward(&mut g, store, a, b).unwrap();
    g.value(y).clone()
}

#[test]
fn super_block_is_identity_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (i, fusion) in [Fusion::SumLl, Fusion::Concat].into_iter().enumerate() {
        for use_cbam in [true, false] {
            let mut cfg = SuperBlockConfig::new(3, 6).with_fusion(fusion);
            cfg.use_cbam = use_cbam;
            let (store, block) = super_block::<f32>(cfg, i as u64);
            for _ in 0..5 {
                let xe = Tensor::<f32>::randn([2, 3, 8, 12], 2.0, &mut rng);
                let xd = Tensor::<f32>::randn([2, 6, 4, 6], 5.0, &mut rng);
                let out = run_super(&store, &block, &xe, &xd);
                assert!(out.max_abs_diff(&xe).unwrap() <= 1e-5);
            }
        }
    }
}

#[test]
fn suppression_residual_matches_subband_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for fusion in [Fusion::SumLl, Fusion::Concat] {
        let mut cfg = SuperBlockConfig::new(2, 4).with_fusion(fusion);
        cfg.fd.zero_init_final = false;
        let (store, block) = super_block::<f64>(cfg, 4);
        let xe = Tensor::<f64>::randn([1, 2, 8, 8], 1.0, &mut rng);
        let xd = Tensor::<f64>::randn([1, 4, 4, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let (a, b) = (g.constant(xe.clone()), g.constant(xd));
        let tr = block.forward_traced(&mut g, &store, a, b).unwrap();
        let res = g.value(tr.residual);
        assert!(res.max_abs() > 1e-3, "residual should be non-trivial");
        let diff = xe.zip_map(g.value(tr.output), |p, q| p - q).unwrap();
        let w_diff = wavelet::analysis_stacked(&diff).unwrap();
        assert!(w_diff.max_abs_diff(res).unwrap() <= 1e-12);
    }
}

#[test]
fn super_block_rejects_bad_resolution_and_config() {
    let (store, block) = super_block::<f32>(SuperBlockConfig::new(2, 4), 0);
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([1, 2, 8, 8]));
    let b = g.constant(Tensor::zeros([1, 4, 8, 8]));
    assert!(matches!(block.forward(&mut g, &store, a, b), Err(Error::Shape { .. })));

    let mut cfg = SuperBlockConfig::new(2, 4);
    cfg.fd.out_channels = 6;
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(SuperBlock::build(&mut ParamBuilder::new(&mut store, &mut rng, "x"), cfg, 1.0).is_err());
}

#[test]
fn super_block_output_shape() {
    let mut cfg = SuperBlockConfig::new(4, 8);
    cfg.fd.zero_init_final = false;
    let (store, block) = super_block::<f32>(cfg, 1);
    let out = run_super(&store, &block, &Tensor::ones([3, 4, 6, 10]), &Tensor::ones([3, 8, 3, 5]));
    assert_eq!(out.shape(), Shape::new(3, 4, 6, 10));
}

/// Overwrites a 3×3 conv weight `[cout, cin, 3, 3]` with centre-tap
/// identity from input channel `i` to output channel `i` for `i < n`.
fn identity_kernel<T: Scalar>(store: &mut ParamStore<T>, conv: &Conv, n: usize) {
    let w = &mut store.get_mut(conv.weight).value;
    let mut t = Tensor::zeros(w.shape());
    for i in 0..n {
        t.set(i, i, 1, 1, T::one());
    }
    *w = t;
}

#[test]
fn baseline_with_identity_like_fd_returns_skip() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dec = BaselineDecoder::build(&mut ParamBuilder::new(&mut store, &mut rng, "b"), 3, 6).unwrap();
    identity_kernel(&mut store, &dec.fd.conv1, 3);
    identity_kernel(&mut store, &dec.fd.conv2, 3);
    // relu passes non-negative skips unchanged
    let xe = Tensor::<f64>::rand_uniform([2, 3, 8, 8], 0.0, 1.0, &mut rng);
    let xd = Tensor::<f64>::randn([2, 6, 4, 4], 1.0, &mut rng);
    let mut g = Graph::new();
    let (a, b) = (g.constant(xe.clone()), g.constant(xd));
    let y = dec.forward(&mut g, &store, a, b).unwrap();
    assert_eq!(g.shape(y), Shape::new(2, 3, 8, 8));
    assert!(g.value(y).max_abs_diff(&xe).unwrap() <= 1e-15);
}

#[test]
fn baseline_preserves_constants_away_from_border() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dec = BaselineDecoder::build(&mut ParamBuilder::new(&mut store, &mut rng, "b"), 2, 4).unwrap();
    let mut g = Graph::new();
    let a = g.constant(Tensor::full([1, 2, 12, 12], 0.5));
    let b = g.constant(Tensor::full([1, 4, 6, 6], -0.25));
    let y = dec.forward(&mut g, &store, a, b).unwrap();
    let y = g.value(y);
    for c in 0..2 {
        let v = y.at(0, c, 2, 2);
        for h in 2..10 {
            for w in 2..10 {
                assert!((y.at(0, c, h, w) - v).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn encoder_stage_with_identity_like_conv_keeps_constant() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = EncoderStage::build(&mut ParamBuilder::new(&mut store, &mut rng, "e"), 2, 2).unwrap();
    identity_kernel(&mut store, &enc.fe.conv1, 2);
    identity_kernel(&mut store, &enc.fe.conv2, 2);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([1, 2, 6, 8], 1.5));
    let (skip, pooled) = enc.forward(&mut g, &store, x).unwrap();
    assert!(g.value(skip).data().iter().all(|&v| v == 1.5));
    assert_eq!(g.shape(pooled), Shape::new(1, 2, 3, 4));
    assert!(g.value(pooled).data().iter().all(|&v| v == 1.5));
}

#[test]
fn encoder_stage_rejects_odd_extent() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = EncoderStage::build(&mut ParamBuilder::new(&mut store, &mut rng, "e"), 1, 2).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones([1, 1, 5, 4]));
    assert!(matches!(enc.forward(&mut g, &store, x), Err(Error::OddExtent { .. })));
}

#[test]
fn model_decoder_is_identity_cascade_at_init() {
    let model = Model::<f32>::build(ModelSpec::new(2, 8, DecoderKind::Super), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::randn([2, 1, 32, 32], 1.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let tr = model.forward_traced(&mut g, xv).unwrap();
    for k in 0..2 {
        let d = g.value(tr.decoded[k]).max_abs_diff(g.value(tr.skips[k])).unwrap();
        assert!(d <= 1e-5, "stage {} deviates by {d}", k + 1);
    }
    let direct = model.apply_head(&mut g, xv, tr.skips[0]).unwrap();
    assert!(g.value(tr.output).max_abs_diff(g.value(direct)).unwrap() <= 1e-5);
}

#[test]
fn super_has_more_parameters_than_baseline() {
    let s = Model::<f32>::build(ModelSpec::new(2, 8, DecoderKind::Super), 0).unwrap();
    let b = Model::<f32>::build(ModelSpec::new(2, 8, DecoderKind::Baseline), 0).unwrap();
    assert!(s.param_count() > b.param_count());
}

#[test]
fn full_model_gradients_match_differences() {
    let mut spec = ModelSpec::new(1, 2, DecoderKind::Super);
    spec.fd_zero_init = false;
    let mut model = Model::<f64>::build(spec, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::randn([1, 1, 8, 8], 1.0, &mut rng);
    let probe = Tensor::<f64>::randn([1, 1, 8, 8], 1.0, &mut rng);

    let loss = |g: &mut Graph<f64>, m: &Model<f64>, x: &Tensor<f64>| {
        let xv = g.input(x.clone());
        let y = m.forward(g, xv)?;
        let p = g.constant(probe.clone());
        let prod = g.mul(y, p)?;
        Ok((xv, g.sum(prod)))
    };

    // parameters
    let wiring = model.clone();
    let worst = grad_check_params(
        &mut model.store,
        |g, store| {
            let mut m = wiring.clone();
            m.store = store.clone();
            loss(g, &m, &x).map(|(_, l)| l)
        },
        1e-5,
    )
    .unwrap();
    assert!(worst <= 1e-5, "parameter gradient error {worst}");

    // input
    let worst = crate::tensor::gradcheck::grad_check(
        |g, xv| {
            let y = model.forward(g, xv)?;
            let p = g.constant(probe.clone());
            let prod = g.mul(y, p)?;
            Ok(g.sum(prod))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(worst <= 1e-5, "input gradient error {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn model_shape_contract(
        depth in 1usize..=3,
        stem_pow in 0usize..=2,
        blocks_h in 1usize..=4,
        blocks_w in 1usize..=4,
        baseline in any::<bool>(),
        concat in any::<bool>(),
    ) {
        // widths stay ≤ 16 through the bottleneck
        let stem = (1usize << stem_pow).min(16 >> depth).max(1);
        let m = 1usize << depth;
        let (h, w) = ((blocks_h * m).min(64), (blocks_w * m).min(64));
        let mut spec = ModelSpec::new(depth, stem, if baseline { DecoderKind::Baseline } else { DecoderKind::Super });
        if concat {
            spec.fusion = Fusion::Concat;
        }
        spec.fd_zero_init = false;
        let model = Model::<f32>::build(spec, 0).unwrap();
        let y = model.predict(&Tensor::ones([1, 1, h, w])).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(1, 1, h, w));
        prop_assert!(y.all_finite());
    }
}
