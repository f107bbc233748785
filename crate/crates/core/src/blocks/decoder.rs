//! Encoder and decoder stages.

use serde::{Deserialize, Serialize};

use super::layers::{Cbam, CbamSpec, Conv, DoubleConv, DoubleConvSpec, ParamBuilder};
use super::params::{Init, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, UpsampleMode, Var};

/// How the deeper decoder feature joins the skip feature's subbands.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Project to the skip width and add into the LL band only.
    #[default]
    SumLl,
    /// Append the deeper feature's channels after the four bands.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperBlockConfig {
    pub skip_channels: usize,
    pub deeper_channels: usize,
    pub fusion: Fusion,
    pub fd: DoubleConvSpec,
    pub use_cbam: bool,
    pub cbam_reduction: usize,
    pub cbam_kernel: usize,
}

impl SuperBlockConfig {
    /// Defaults: LL-sum fusion, CBAM on, zero-initialized final F_d layer
    /// without a trailing relu so the subtracted residual can take either sign.
    pub fn new(skip_channels: usize, deeper_channels: usize) -> Self {
        SuperBlockConfig {
            skip_channels,
            deeper_channels,
            fusion: Fusion::SumLl,
            fd: DoubleConvSpec {
                in_channels: 4 * skip_channels,
                out_channels: 4 * skip_channels,
                zero_init_final: true,
                final_relu: false,
            },
            use_cbam: true,
            cbam_reduction: 4,
            cbam_kernel: 7,
        }
    }

    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.fusion = fusion;
        self.fd.in_channels = self.fused_channels();
        self
    }

    pub fn fused_channels(&self) -> usize {
        match self.fusion {
            Fusion::SumLl => 4 * self.skip_channels,
            Fusion::Concat => 4 * self.skip_channels + self.deeper_channels,
        }
    }

    pub fn needs_projection(&self) -> bool {
        self.fusion == Fusion::SumLl && self.deeper_channels != self.skip_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.fd.out_channels != 4 * self.skip_channels {
            return Err(Error::shape(
                "super_block",
                format!(
                    "F_d output channels {} != 4 x skip channels {}",
                    self.fd.out_channels, self.skip_channels
                ),
            ));
        }
        if self.fd.in_channels != self.fused_channels() {
            return Err(Error::shape(
                "super_block",
                format!(
                    "F_d input channels {} != fused channels {}",
                    self.fd.in_channels,
                    self.fused_channels()
                ),
            ));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(
    op: &'static str,
    g: &Graph<T>,
    x_e: Var,
    x_d: Var,
    skip_channels: usize,
    deeper_channels: usize,
) -> Result<()> {
    let (se, sd) = (g.shape(x_e), g.shape(x_d));
    if se.c() != skip_channels {
        return Err(Error::shape(op, format!("skip channels {} != {skip_channels}", se.c())));
    }
    if sd.c() != deeper_channels {
        return Err(Error::shape(op, format!("deeper channels {} != {deeper_channels}", sd.c())));
    }
    if se.b() != sd.b() {
        return Err(Error::shape(op, format!("batch {} vs {}", se.b(), sd.b())));
    }
    if 2 * sd.h() != se.h() || 2 * sd.w() != se.w() {
        return Err(Error::shape(
            op,
            format!(
                "deeper resolution {}x{} is not half of skip resolution {}x{}",
                sd.h(),
                sd.w(),
                se.h(),
                se.w()
            ),
        ));
    }
    Ok(())
}

/// Intermediate values of one SUPER stage.
#[derive(Clone, Copy, Debug)]
pub struct SuperTrace {
    /// Stacked subbands of the skip feature, `[B, 4C, H/2, W/2]`.
    pub bands: Var,
    /// `CBAM(F_d(bands ⊕ x_d))`, same shape as `bands`.
    pub residual: Var,
    pub output: Var,
}

/// Decoder stage that reconstructs the skip feature through an orthonormal
/// Haar filter bank after subtracting a learned subband residual:
/// `out = Wᵀ(W x_e − CBAM(F_d(W x_e ⊕ x_d)))`.
#[derive(Clone, Debug)]
pub struct SuperBlock {
    pub config: SuperBlockConfig,
    pub project: Option<Conv>,
    pub fd: DoubleConv,
    pub cbam: Option<Cbam>,
}

impl SuperBlock {
    /// `fd_gain` scales the He bound of both F_d convolutions.
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, config: SuperBlockConfig, fd_gain: f64) -> Result<Self> {
        config.validate()?;
        let project = if config.needs_projection() {
            Some(Conv::build(
                &mut pb.scope("project"),
                config.deeper_channels,
                config.skip_channels,
                1,
                true,
                Init::HE,
            )?)
        } else {
            None
        };
        let fd = DoubleConv::build(&mut pb.scope("fd"), config.fd, fd_gain)?;
        let cbam = if config.use_cbam {
            let spec = CbamSpec {
                channels: 4 * config.skip_channels,
                reduction: config.cbam_reduction,
                spatial_kernel: config.cbam_kernel,
            };
            Some(Cbam::build(&mut pb.scope("cbam"), spec)?)
        } else {
            None
        };
        Ok(SuperBlock {
            config,
            project,
            fd,
            cbam,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x_e: Var, x_d: Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, x_e, x_d)?.output)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_e: Var,
        x_d: Var,
    ) -> Result<SuperTrace> {
        let cfg = &self.config;
        check_pair("super_block", g, x_e, x_d, cfg.skip_channels, cfg.deeper_channels)?;

        let bands = g.haar_analysis(x_e)?;
        let fused = match cfg.fusion {
            Fusion::SumLl => {
                let deeper = match &self.project {
                    Some(p) => p.forward(g, store, x_d)?,
                    None => x_d,
                };
                let parts = g.chunk_channels(bands, 4)?;
                let ll = g.add(parts[0], deeper)?;
                g.concat_channels(&[ll, parts[1], parts[2], parts[3]])?
            }
            Fusion::Concat => g.concat_channels(&[bands, x_d])?,
        };
        let mut residual = self.fd.forward(g, store, fused)?;
        if let Some(cbam) = &self.cbam {
            residual = cbam.forward(g, store, residual)?;
        }
        let rc = g.shape(residual).c();
        if rc != 4 * cfg.skip_channels {
            return Err(Error::shape(
                "super_block",
                format!("residual channels {rc} != 4 x {}", cfg.skip_channels),
            ));
        }
        let suppressed = g.sub(bands, residual)?;
        let output = g.haar_synthesis(suppressed)?;
        Ok(SuperTrace {
            bands,
            residual,
            output,
        })
    }
}

/// Conventional decoder stage: bilinear ×2 upsampling of the deeper
/// feature, channel concatenation `[x_e, up(x_d)]`, DoubleConv to the skip width.
#[derive(Clone, Debug)]
pub struct BaselineDecoder {
    pub skip_channels: usize,
    pub deeper_channels: usize,
    pub fd: DoubleConv,
}

impl BaselineDecoder {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, skip_channels: usize, deeper_channels: usize) -> Result<Self> {
        let spec = DoubleConvSpec::new(skip_channels + deeper_channels, skip_channels);
        Ok(BaselineDecoder {
            skip_channels,
            deeper_channels,
            fd: DoubleConv::build(&mut pb.scope("fd"), spec, 1.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x_e: Var, x_d: Var) -> Result<Var> {
        check_pair("baseline_decoder", g, x_e, x_d, self.skip_channels, self.deeper_channels)?;
        let up = g.upsample2(x_d, UpsampleMode::Bilinear);
        let cat = g.concat_channels(&[x_e, up])?;
        self.fd.forward(g, store, cat)
    }
}

/// `F_e` (DoubleConv) followed by 2×2 average pooling.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub fe: DoubleConv,
}

impl EncoderStage {
    pub fn build<T: Scalar>(pb: &mut ParamBuilder<'_, T>, in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(EncoderStage {
            fe: DoubleConv::build(&mut pb.scope("fe"), DoubleConvSpec::new(in_channels, out_channels), 1.0)?,
        })
    }

    /// Returns `(skip features, pooled features)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x);
        if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
            return Err(Error::OddExtent {
                height: s.h(),
                width: s.w(),
            });
        }
        let features = self.fe.forward(g, store, x)?;
        let pooled = g.avg_pool2(features)?;
        Ok((features, pooled))
    }
}
