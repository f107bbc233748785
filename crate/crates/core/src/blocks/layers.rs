use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, PoolKind, Scalar, Shape, Var};

/// Registers parameters under a dotted name prefix, drawing initial values
/// from one deterministic stream.
pub struct ParamBuilder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, prefix: impl Into<String>) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: prefix.into(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn add(&mut self, leaf: &str, shape: Shape, init: Init) -> Result<ParamId> {
        let value = init.tensor(shape, self.rng);
        self.store.add(format!("{}.{leaf}", self.prefix), value)
    }
}

/// 2-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Same-size convolution (`padding = kernel / 2`, stride 1).
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = pb.add("weight", Shape::new(cout, cin, kernel, kernel), init)?;
        let bias = if bias {
            Some(pb.add("bias", Shape::new(cout, 1, 1, 1), Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(g, self.weight);
        let b = self.bias.map(|b| store.bind(g, b));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoubleConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Start the second convolution (weights and bias) at exactly zero.
    #[serde(default)]
    pub zero_init_final: bool,
    /// Apply relu after the second convolution as well as the first.
    #[serde(default = "yes")]
    pub final_relu: bool,
}

fn yes() -> bool {
    true
}

impl DoubleConvSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        DoubleConvSpec {
            in_channels,
            out_channels,
            zero_init_final: false,
            final_relu: true,
        }
    }
}

/// Two same-size 3×3 convolutions with relu in between; hidden width equals
/// the output width.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub spec: DoubleConvSpec,
    pub conv1: Conv,
    pub conv2: Conv,
}

impl DoubleConv {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, spec: DoubleConvSpec, gain: f64) -> Result<Self> {
        let he = Init::HeUniform { gain };
        let conv1 = Conv::build(&mut pb.scope("conv1"), spec.in_channels, spec.out_channels, 3, true, he)?;
        let init2 = if spec.zero_init_final { Init::Zeros } else { he };
        let conv2 = Conv::build(&mut pb.scope("conv2"), spec.out_channels, spec.out_channels, 3, true, init2)?;
        Ok(DoubleConv { spec, conv1, conv2 })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).c();
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "double_conv",
                format!("input channels {c} != spec in_channels {}", self.spec.in_channels),
            ));
        }
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h);
        let y = self.conv2.forward(g, store, h)?;
        Ok(if self.spec.final_relu { g.relu(y) } else { y })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbamSpec {
    pub channels: usize,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    #[serde(default = "default_spatial_kernel")]
    pub spatial_kernel: usize,
}

fn default_reduction() -> usize {
    4
}

fn default_spatial_kernel() -> usize {
    7
}

impl CbamSpec {
    pub fn new(channels: usize) -> Self {
        CbamSpec {
            channels,
            reduction: default_reduction(),
            spatial_kernel: default_spatial_kernel(),
        }
    }

    /// Hidden width of the channel MLP, clamped to at least one.
    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction.max(1)).max(1)
    }
}

/// Channel-then-spatial multiplicative attention.
///
/// `M_c = σ(MLP(avgpool x) + MLP(maxpool x))` gates channels, then
/// `M_s = σ(conv_k([mean_c; max_c]))` gates positions. Both gates lie in
/// `(0, 1)`, so the output never exceeds the input in magnitude.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub spec: CbamSpec,
    pub mlp1: Conv,
    pub mlp2: Conv,
    pub spatial: Conv,
}

impl Cbam {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, spec: CbamSpec) -> Result<Self> {
        if spec.spatial_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "CBAM spatial kernel {} must be odd",
                spec.spatial_kernel
            )));
        }
        let hidden = spec.hidden();
        let mlp1 = Conv::build(&mut pb.scope("mlp1"), spec.channels, hidden, 1, true, Init::HE)?;
        let mlp2 = Conv::build(&mut pb.scope("mlp2"), hidden, spec.channels, 1, true, Init::HE)?;
        let spatial = Conv::build(&mut pb.scope("spatial"), 2, 1, spec.spatial_kernel, false, Init::HE)?;
        Ok(Cbam {
            spec,
            mlp1,
            mlp2,
            spatial,
        })
    }

    fn mlp<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.mlp1.forward(g, store, x)?;
        let h = g.relu(h);
        self.mlp2.forward(g, store, h)
    }

    /// Channel gate `M_c`, `[B, C, 1, 1]`.
    pub fn channel_gate<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let avg = g.pool(PoolKind::GlobalAvg, x)?;
        let max = g.pool(PoolKind::GlobalMax, x)?;
        let a = self.mlp(g, store, avg)?;
        let m = self.mlp(g, store, max)?;
        let s = g.add(a, m)?;
        Ok(g.sigmoid(s))
    }

    /// Spatial gate `M_s`, `[B, 1, H, W]`.
    pub fn spatial_gate<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mean = g.pool(PoolKind::ChannelMean, x)?;
        let max = g.pool(PoolKind::ChannelMax, x)?;
        let both = g.concat_channels(&[mean, max])?;
        let s = self.spatial.forward(g, store, both)?;
        Ok(g.sigmoid(s))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).c();
        if c != self.spec.channels {
            return Err(Error::shape(
                "cbam",
                format!("input channels {c} != spec channels {}", self.spec.channels),
            ));
        }
        let mc = self.channel_gate(g, store, x)?;
        let xc = g.scale_channels(x, mc)?;
        let ms = self.spatial_gate(g, store, xc)?;
        g.scale_spatial(xc, ms)
    }
}
