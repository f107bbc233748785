//! Toy U-Net: L encoder stages, a bottleneck, L decoder stages, 1×1 head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{BaselineDecoder, EncoderStage, Fusion, SuperBlock, SuperBlockConfig};
use super::layers::{Conv, DoubleConv, DoubleConvSpec, ParamBuilder};
use super::params::{Init, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    #[default]
    Super,
    Baseline,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Super => "super",
            DecoderKind::Baseline => "baseline",
        }
    }
}

/// What the 1×1 head produces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Segmentation logit.
    #[default]
    Logit,
    /// Residual added to the (single-channel) input image.
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub depth: usize,
    pub stem_channels: usize,
    #[serde(default = "one")]
    pub in_channels: usize,
    #[serde(default)]
    pub decoder: DecoderKind,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default = "yes")]
    pub use_cbam: bool,
    #[serde(default = "four")]
    pub cbam_reduction: usize,
    #[serde(default = "seven")]
    pub cbam_kernel: usize,
    #[serde(default)]
    pub head: HeadKind,
    /// Start each SUPER stage's final F_d convolution at zero.
    #[serde(default = "yes")]
    pub fd_zero_init: bool,
    /// Multiplier on the He bound of SUPER F_d convolutions.
    #[serde(default = "unit")]
    pub fd_gain: f64,
}

fn one() -> usize {
    1
}
fn four() -> usize {
    4
}
fn seven() -> usize {
    7
}
fn yes() -> bool {
    true
}
fn unit() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn new(depth: usize, stem_channels: usize, decoder: DecoderKind) -> Self {
        ModelSpec {
            depth,
            stem_channels,
            in_channels: 1,
            decoder,
            fusion: Fusion::SumLl,
            use_cbam: true,
            cbam_reduction: 4,
            cbam_kernel: 7,
            head: HeadKind::Logit,
            fd_zero_init: true,
            fd_gain: 1.0,
        }
    }

    /// Width of encoder stage `k` (1-based); `k = depth + 1` is the bottleneck.
    pub fn width(&self, k: usize) -> usize {
        self.stem_channels << (k - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, what: &str| Err(Error::config(field, what));
        if self.depth == 0 {
            return bad("depth", "must be at least 1");
        }
        if self.depth > 8 {
            return bad("depth", "above 8 is not supported");
        }
        if self.stem_channels == 0 {
            return bad("stem_channels", "must be positive");
        }
        if self.in_channels == 0 {
            return bad("in_channels", "must be positive");
        }
        if self.cbam_reduction == 0 {
            return bad("cbam_reduction", "must be positive");
        }
        if self.cbam_kernel.is_multiple_of(2) {
            return bad("cbam_kernel", "must be odd");
        }
        if self.head == HeadKind::Residual && self.in_channels != 1 {
            return bad("head", "residual head needs a single input channel");
        }
        if !(self.fd_gain.is_finite() && self.fd_gain >= 0.0) {
            return bad("fd_gain", "must be finite and non-negative");
        }
        Ok(())
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let m = 1usize << self.depth;
        if shape.c() != self.in_channels {
            return Err(Error::shape(
                "model",
                format!("input channels {} != {}", shape.c(), self.in_channels),
            ));
        }
        if shape.h() == 0 || shape.w() == 0 || !shape.h().is_multiple_of(m) || !shape.w().is_multiple_of(m) {
            return Err(Error::shape(
                "model",
                format!("input {}x{} not divisible by 2^{} = {m}", shape.h(), shape.w(), self.depth),
            ));
        }
        Ok(())
    }

    pub fn super_config(&self, k: usize) -> SuperBlockConfig {
        let mut cfg = SuperBlockConfig::new(self.width(k), self.width(k + 1)).with_fusion(self.fusion);
        cfg.fd.zero_init_final = self.fd_zero_init;
        cfg.use_cbam = self.use_cbam;
        cfg.cbam_reduction = self.cbam_reduction;
        cfg.cbam_kernel = self.cbam_kernel;
        cfg
    }
}

#[derive(Clone, Debug)]
pub enum DecoderStage {
    Super(SuperBlock),
    Baseline(BaselineDecoder),
}

impl DecoderStage {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x_e: Var, x_d: Var) -> Result<Var> {
        match self {
            DecoderStage::Super(b) => b.forward(g, store, x_e, x_d),
            DecoderStage::Baseline(b) => b.forward(g, store, x_e, x_d),
        }
    }
}

#[derive(Clone, Debug)]
struct Net {
    encoder: Vec<EncoderStage>,
    bottleneck: DoubleConv,
    /// Index `k − 1` holds decoder stage `k`.
    decoder: Vec<DecoderStage>,
    head: Conv,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelTrace {
    pub input: Var,
    /// Pre-pool encoder features; index `k − 1` is stage `k`.
    pub skips: Vec<Var>,
    pub bottleneck: Var,
    /// Decoder stage outputs; index `k − 1` is stage `k`.
    pub decoded: Vec<Var>,
    pub output: Var,
}

const STREAM_ENCODER: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_HEAD: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A model's wiring plus its parameters.
///
/// Encoder, decoder and head parameters come from separate streams of the
/// seed, so two models that differ only in decoder kind share identical
/// encoder and head initializations.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub spec: ModelSpec,
    pub seed: u64,
    pub store: ParamStore<T>,
    net: Net,
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let l = spec.depth;

        let mut rng = stream(seed, STREAM_ENCODER);
        let mut encoder = Vec::with_capacity(l);
        for k in 1..=l {
            let cin = if k == 1 { spec.in_channels } else { spec.width(k - 1) };
            let mut pb = ParamBuilder::new(&mut store, &mut rng, format!("enc.stage{k}"));
            encoder.push(EncoderStage::build(&mut pb, cin, spec.width(k))?);
        }
        let bottleneck = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, "bottleneck");
            DoubleConv::build(&mut pb, DoubleConvSpec::new(spec.width(l), spec.width(l + 1)), 1.0)?
        };

        let mut rng = stream(seed, STREAM_DECODER);
        let mut decoder = Vec::with_capacity(l);
        for k in 1..=l {
            let mut pb = ParamBuilder::new(&mut store, &mut rng, format!("dec.stage{k}"));
            decoder.push(match spec.decoder {
                DecoderKind::Super => DecoderStage::Super(SuperBlock::build(&mut pb, spec.super_config(k), spec.fd_gain)?),
                DecoderKind::Baseline => {
                    DecoderStage::Baseline(BaselineDecoder::build(&mut pb, spec.width(k), spec.width(k + 1))?)
                }
            });
        }

        let mut rng = stream(seed, STREAM_HEAD);
        let head = Conv::build(
            &mut ParamBuilder::new(&mut store, &mut rng, "head"),
            spec.width(1),
            1,
            1,
            true,
            Init::HE,
        )?;

        Ok(Model {
            spec,
            seed,
            store,
            net: Net {
                encoder,
                bottleneck,
                decoder,
                head,
            },
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            seed: self.seed,
            store: self.store.cast(),
            net: self.net.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Decoder stage `k` (1-based).
    pub fn decoder_stage(&self, k: usize) -> &DecoderStage {
        &self.net.decoder[k - 1]
    }

    /// Runs encoder stages and the bottleneck. Returns `(skips, bottleneck)`.
    pub fn encode(&self, g: &mut Graph<T>, x: Var) -> Result<(Vec<Var>, Var)> {
        self.spec.check_input(g.shape(x))?;
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut h = x;
        for stage in &self.net.encoder {
            let (skip, pooled) = stage.forward(g, &self.store, h)?;
            skips.push(skip);
            h = pooled;
        }
        let bottleneck = self.net.bottleneck.forward(g, &self.store, h)?;
        Ok((skips, bottleneck))
    }

    /// Runs decoder stages `L..1` on the given skips. Returns every stage
    /// output, index `k − 1` for stage `k`.
    pub fn decode(&self, g: &mut Graph<T>, skips: &[Var], bottleneck: Var) -> Result<Vec<Var>> {
        if skips.len() != self.spec.depth {
            return Err(Error::InvalidArgument(format!(
                "{} skips for depth {}",
                skips.len(),
                self.spec.depth
            )));
        }
        let mut decoded = vec![bottleneck; self.spec.depth];
        let mut deeper = bottleneck;
        for k in (1..=self.spec.depth).rev() {
            deeper = self.net.decoder[k - 1].forward(g, &self.store, skips[k - 1], deeper)?;
            decoded[k - 1] = deeper;
        }
        Ok(decoded)
    }

    fn head(&self, g: &mut Graph<T>, input: Var, features: Var) -> Result<Var> {
        let y = self.net.head.forward(g, &self.store, features)?;
        match self.spec.head {
            HeadKind::Logit => Ok(y),
            HeadKind::Residual => g.add(input, y),
        }
    }

    pub fn forward_traced(&self, g: &mut Graph<T>, x: Var) -> Result<ModelTrace> {
        let (skips, bottleneck) = self.encode(g, x)?;
        let decoded = self.decode(g, &skips, bottleneck)?;
        let output = self.head(g, x, decoded[0])?;
        Ok(ModelTrace {
            input: x,
            skips,
            bottleneck,
            decoded,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, x)?.output)
    }

    /// Head applied directly to `features` (width of stage 1).
    pub fn apply_head(&self, g: &mut Graph<T>, input: Var, features: Var) -> Result<Var> {
        self.head(g, input, features)
    }

    /// Inference without gradient bookkeeping beyond the throwaway graph.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_double() {
        let s = ModelSpec::new(3, 8, DecoderKind::Super);
        assert_eq!((1..=4).map(|k| s.width(k)).collect::<Vec<_>>(), vec![8, 16, 32, 64]);
    }

    #[test]
    fn reference_shape() {
        let m = Model::<f32>::build(ModelSpec::new(2, 8, DecoderKind::Super), 0).unwrap();
        let y = m.predict(&Tensor::ones([1, 1, 32, 32])).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 32, 32));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let m = Model::<f32>::build(ModelSpec::new(2, 4, DecoderKind::Baseline), 0).unwrap();
        assert!(matches!(m.predict(&Tensor::ones([1, 1, 30, 32])), Err(Error::Shape { .. })));
    }

    #[test]
    fn encoder_and_head_init_are_shared_across_decoder_kinds() {
        let a = Model::<f32>::build(ModelSpec::new(2, 4, DecoderKind::Super), 5).unwrap();
        let b = Model::<f32>::build(ModelSpec::new(2, 4, DecoderKind::Baseline), 5).unwrap();
        for name in ["enc.stage1.fe.conv1.weight", "bottleneck.conv2.weight", "head.weight"] {
            let pa = a.store.get(a.store.find(name).unwrap());
            let pb = b.store.get(b.store.find(name).unwrap());
            assert_eq!(pa.value, pb.value, "{name}");
        }
    }

    #[test]
    fn spec_defaults_from_json() {
        let s: ModelSpec = serde_json::from_str(r#"{"depth":2,"stem_channels":8}"#).unwrap();
        assert_eq!(s, ModelSpec::new(2, 8, DecoderKind::Super));
        assert!(serde_json::from_str::<ModelSpec>(r#"{"depth":2,"stem_channels":8,"bogus":1}"#).is_err());
    }
}
