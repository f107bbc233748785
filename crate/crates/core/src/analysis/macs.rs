//! Exact multiply-accumulate and parameter accounting.
//!
//! Convolutions cost `B·H'·W'·Cout·Cin·kh·kw`. Every other op is charged a
//! fixed number of MAC-equivalents per element:
//!
//! | op                                   | per            | constant |
//! |--------------------------------------|----------------|----------|
//! | Haar analysis / synthesis            | output element | 8        |
//! | bilinear ×2 upsample                 | output element | 4        |
//! | add, sub, multiply, relu, sigmoid    | output element | 1        |
//! | 2×2 average pool, global/channel pool| input element  | 1        |
//! | concat, slice                        | none           | 0        |

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::blocks::{DecoderKind, Fusion, HeadKind, ModelSpec};
use crate::error::Result;
use crate::tensor::Shape;

pub const HAAR_PER_OUTPUT: u64 = 8;
pub const BILINEAR_PER_OUTPUT: u64 = 4;
pub const POINTWISE_PER_OUTPUT: u64 = 1;
pub const POOL_PER_INPUT: u64 = 1;

fn vol(s: Shape) -> u64 {
    s.numel() as u64
}

/// MACs of a stride-1 same-size convolution producing `out`.
pub fn conv_macs(out: Shape, in_channels: usize, kernel: usize) -> u64 {
    vol(out) * (in_channels * kernel * kernel) as u64
}

/// MAC-equivalents of a channel-linear op charged `per_element` per output element.
pub fn channel_linear_macs(out: Shape, per_element: u64) -> u64 {
    vol(out) * per_element
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacRow {
    pub name: String,
    pub op: String,
    pub output_shape: Shape,
    pub macs: u64,
    pub params: u64,
    pub input_volume: u64,
    pub output_volume: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub spec: ModelSpec,
    pub input_shape: Shape,
    pub rows: Vec<MacRow>,
    pub total_macs: u64,
    pub total_params: u64,
}

impl MacReport {
    /// Rows whose name starts with `prefix`.
    pub fn rows_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a MacRow> + 'a {
        self.rows.iter().filter(move |r| r.name.starts_with(prefix))
    }

    pub fn macs_with_prefix(&self, prefix: &str) -> u64 {
        self.rows_with_prefix(prefix).map(|r| r.macs).sum()
    }

    pub fn params_with_prefix(&self, prefix: &str) -> u64 {
        self.rows_with_prefix(prefix).map(|r| r.params).sum()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["name", "op", "output_shape", "macs", "params", "input_volume", "output_volume"])?;
        for r in &self.rows {
            let [b, c, h, wd] = r.output_shape.0;
            out.write_record([
                r.name.clone(),
                r.op.clone(),
                format!("{b}x{c}x{h}x{wd}"),
                r.macs.to_string(),
                r.params.to_string(),
                r.input_volume.to_string(),
                r.output_volume.to_string(),
            ])?;
        }
        out.write_record([
            "total".to_string(),
            String::new(),
            String::new(),
            self.total_macs.to_string(),
            self.total_params.to_string(),
            String::new(),
            String::new(),
        ])?;
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

struct Counter {
    rows: Vec<MacRow>,
}

impl Counter {
    fn push(&mut self, name: String, op: &str, input: Shape, output: Shape, macs: u64, params: u64) {
        self.rows.push(MacRow {
            name,
            op: op.to_string(),
            output_shape: output,
            macs,
            params,
            input_volume: vol(input),
            output_volume: vol(output),
        });
    }

    fn conv(&mut self, name: String, input: Shape, cout: usize, kernel: usize, bias: bool) -> Shape {
        let out = input.with_c(cout);
        let params = (cout * input.c() * kernel * kernel + if bias { cout } else { 0 }) as u64;
        self.push(name, &format!("conv{kernel}x{kernel}"), input, out, conv_macs(out, input.c(), kernel), params);
        out
    }

    fn pointwise(&mut self, name: String, op: &str, shape: Shape) {
        self.push(name, op, shape, shape, channel_linear_macs(shape, POINTWISE_PER_OUTPUT), 0);
    }

    fn pool(&mut self, name: String, op: &str, input: Shape, out: Shape) {
        self.push(name, op, input, out, vol(input) * POOL_PER_INPUT, 0);
    }

    fn double_conv(&mut self, prefix: &str, input: Shape, cout: usize, final_relu: bool) -> Shape {
        let h = self.conv(format!("{prefix}.conv1"), input, cout, 3, true);
        self.pointwise(format!("{prefix}.relu1"), "relu", h);
        let y = self.conv(format!("{prefix}.conv2"), h, cout, 3, true);
        if final_relu {
            self.pointwise(format!("{prefix}.relu2"), "relu", y);
        }
        y
    }

    fn cbam(&mut self, prefix: &str, x: Shape, reduction: usize, kernel: usize) {
        let c = x.c();
        let hidden = (c / reduction.max(1)).max(1);
        let pooled = Shape::new(x.b(), c, 1, 1);
        for path in ["avg", "max"] {
            self.pool(format!("{prefix}.{path}pool"), &format!("global_{path}"), x, pooled);
            let h = Shape::new(x.b(), hidden, 1, 1);
            let mlp1_params = (hidden * c + hidden) as u64;
            let mlp2_params = (c * hidden + c) as u64;
            // the MLP weights are shared by both paths; charge parameters once
            let first = path == "avg";
            self.push(
                format!("{prefix}.mlp1.{path}"),
                "conv1x1",
                pooled,
                h,
                conv_macs(h, c, 1),
                if first { mlp1_params } else { 0 },
            );
            self.pointwise(format!("{prefix}.mlp.relu.{path}"), "relu", h);
            self.push(
                format!("{prefix}.mlp2.{path}"),
                "conv1x1",
                h,
                pooled,
                conv_macs(pooled, hidden, 1),
                if first { mlp2_params } else { 0 },
            );
        }
        self.pointwise(format!("{prefix}.channel_sum"), "add", pooled);
        self.pointwise(format!("{prefix}.channel_sigmoid"), "sigmoid", pooled);
        self.pointwise(format!("{prefix}.channel_gate"), "mul", x);
        let plane = x.with_c(1);
        self.pool(format!("{prefix}.channel_mean"), "channel_mean", x, plane);
        self.pool(format!("{prefix}.channel_max"), "channel_max", x, plane);
        let s = self.conv(format!("{prefix}.spatial"), x.with_c(2), 1, kernel, false);
        self.pointwise(format!("{prefix}.spatial_sigmoid"), "sigmoid", s);
        self.pointwise(format!("{prefix}.spatial_gate"), "mul", x);
    }
}

/// Per-layer MAC and parameter table for `spec` at `input_shape`.
///
/// The rows follow the forward pass op by op, so `total_params` equals the
/// built model's parameter count.
pub fn count_macs(spec: &ModelSpec, input_shape: Shape) -> Result<MacReport> {
    spec.validate()?;
    spec.check_input(input_shape)?;
    let l = spec.depth;
    let mut c = Counter { rows: Vec::new() };

    let mut x = input_shape;
    let mut skips = Vec::with_capacity(l);
    for k in 1..=l {
        let skip = c.double_conv(&format!("enc.stage{k}.fe"), x, spec.width(k), true);
        let pooled = skip.with_hw(skip.h() / 2, skip.w() / 2);
        c.pool(format!("enc.stage{k}.pool"), "avg_pool2", skip, pooled);
        skips.push(skip);
        x = pooled;
    }
    let mut deeper = c.double_conv("bottleneck", x, spec.width(l + 1), true);

    for k in (1..=l).rev() {
        let p = format!("dec.stage{k}");
        let skip = skips[k - 1];
        match spec.decoder {
            DecoderKind::Super => {
                let cfg = spec.super_config(k);
                let bands = Shape::new(skip.b(), 4 * skip.c(), skip.h() / 2, skip.w() / 2);
                c.push(format!("{p}.dwt"), "haar_analysis", skip, bands, channel_linear_macs(bands, HAAR_PER_OUTPUT), 0);
                let fused = match cfg.fusion {
                    Fusion::SumLl => {
                        let projected = if cfg.needs_projection() {
                            c.conv(format!("{p}.project"), deeper, skip.c(), 1, true)
                        } else {
                            deeper
                        };
                        c.pointwise(format!("{p}.ll_add"), "add", projected);
                        bands
                    }
                    Fusion::Concat => bands.with_c(bands.c() + deeper.c()),
                };
                let res = c.double_conv(&format!("{p}.fd"), fused, bands.c(), cfg.fd.final_relu);
                if cfg.use_cbam {
                    c.cbam(&format!("{p}.cbam"), res, cfg.cbam_reduction, cfg.cbam_kernel);
                }
                c.pointwise(format!("{p}.subtract"), "sub", bands);
                c.push(format!("{p}.idwt"), "haar_synthesis", bands, skip, channel_linear_macs(skip, HAAR_PER_OUTPUT), 0);
            }
            DecoderKind::Baseline => {
                let up = deeper.with_hw(deeper.h() * 2, deeper.w() * 2);
                c.push(
                    format!("{p}.upsample"),
                    "bilinear_x2",
                    deeper,
                    up,
                    channel_linear_macs(up, BILINEAR_PER_OUTPUT),
                    0,
                );
                let cat = skip.with_c(skip.c() + up.c());
                c.double_conv(&format!("{p}.fd"), cat, skip.c(), true);
            }
        }
        deeper = skip;
    }

    let out = c.conv("head".into(), deeper, 1, 1, true);
    if spec.head == HeadKind::Residual {
        c.pointwise("head.residual_add".into(), "add", out);
    }

    let total_macs = c.rows.iter().map(|r| r.macs).sum();
    let total_params = c.rows.iter().map(|r| r.params).sum();
    Ok(MacReport {
        spec: spec.clone(),
        input_shape,
        rows: c.rows,
        total_macs,
        total_params,
    })
}

/// The two cost regimes of moving from `(H, W, C)` to `(H/2, W/2, 4C)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeComparison {
    pub channel_linear_full: u64,
    pub channel_linear_half: u64,
    /// Dense 3×3 convolution `C → C` at `(H, W)`.
    pub dense_full: u64,
    /// Dense 3×3 convolution `4C → 4C` at `(H/2, W/2)`.
    pub dense_half: u64,
}

pub fn regime_comparison(batch: usize, channels: usize, height: usize, width: usize) -> RegimeComparison {
    let full = Shape::new(batch, channels, height, width);
    let half = Shape::new(batch, 4 * channels, height / 2, width / 2);
    RegimeComparison {
        channel_linear_full: channel_linear_macs(full, POINTWISE_PER_OUTPUT),
        channel_linear_half: channel_linear_macs(half, POINTWISE_PER_OUTPUT),
        dense_full: conv_macs(full, channels, 3),
        dense_half: conv_macs(half, 4 * channels, 3),
    }
}
