//! Single-level orthonormal 2-D Haar filter bank.
//!
//! For each non-overlapping 2×2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2      LH = (a − b + c − d) / 2
//! HL = (a + b − c − d) / 2      HH = (a − b − c + d) / 2
//! ```
//!
//! LH is the horizontal high-pass (differences across columns), HL the
//! vertical one. The transform matrix is orthogonal, so synthesis is its
//! transpose and energy is preserved exactly in exact arithmetic.
//!
//! The stacked form is `[B, 4C, H/2, W/2]` with band-major channel order
//! `[LL₀..LL_{C−1}, LH₀.., HL₀.., HH₀..]`.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Shape, Tensor, Var};

pub const BAND_NAMES: [&str; 4] = ["LL", "LH", "HL", "HH"];

/// The four Haar subbands of a tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands<T = f32> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
    pub source_shape: Shape,
}

impl<T: Scalar> WaveletBands<T> {
    pub fn bands(&self) -> [&Tensor<T>; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn bands_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.ll, &mut self.lh, &mut self.hl, &mut self.hh]
    }

    fn check(&self) -> Result<Shape> {
        let s = self.ll.shape();
        for (name, band) in BAND_NAMES.iter().zip(self.bands()) {
            if band.shape() != s {
                return Err(Error::shape("idwt_haar", format!("band {name} is {} but LL is {s}", band.shape())));
            }
        }
        let expected = Shape::new(s.b(), s.c(), 2 * s.h(), 2 * s.w());
        if self.source_shape != expected {
            return Err(Error::shape(
                "idwt_haar",
                format!("bands {s} cannot rebuild source {}", self.source_shape),
            ));
        }
        Ok(s)
    }
}

fn check_even(s: Shape) -> Result<()> {
    if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) || s.h() == 0 || s.w() == 0 {
        return Err(Error::OddExtent {
            height: s.h(),
            width: s.w(),
        });
    }
    Ok(())
}

/// Haar analysis of `x` into the stacked band-major layout.
pub fn analysis_stacked<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    check_even(s)?;
    let [nb, nc, nh, nw] = s.0;
    let (oh, ow) = (nh / 2, nw / 2);
    let half = T::lit(0.5);
    let mut out = Tensor::zeros([nb, 4 * nc, oh, ow]);
    let band_stride = nc * oh * ow;
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..nb {
        for c in 0..nc {
            let plane = &src[(b * nc + c) * nh * nw..(b * nc + c + 1) * nh * nw];
            let base = b * 4 * band_stride + c * oh * ow;
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * nw + 2 * xx;
                    let (a, bb, cc, d) = (plane[i], plane[i + 1], plane[i + nw], plane[i + nw + 1]);
                    let o = base + y * ow + xx;
                    dst[o] = (a + bb + cc + d) * half;
                    dst[o + band_stride] = (a - bb + cc - d) * half;
                    dst[o + 2 * band_stride] = (a + bb - cc - d) * half;
                    dst[o + 3 * band_stride] = (a - bb - cc + d) * half;
                }
            }
        }
    }
    Ok(out)
}

/// Haar synthesis from the stacked band-major layout.
pub fn synthesis_stacked<T: Scalar>(stacked: &Tensor<T>) -> Result<Tensor<T>> {
    let s = stacked.shape();
    if !s.c().is_multiple_of(4) {
        return Err(Error::Indivisible { channels: s.c(), parts: 4 });
    }
    let [nb, c4, oh, ow] = s.0;
    let nc = c4 / 4;
    let (nh, nw) = (2 * oh, 2 * ow);
    let half = T::lit(0.5);
    let mut out = Tensor::zeros([nb, nc, nh, nw]);
    let band_stride = nc * oh * ow;
    let src = stacked.data();
    let dst = out.data_mut();
    for b in 0..nb {
        for c in 0..nc {
            let plane = &mut dst[(b * nc + c) * nh * nw..(b * nc + c + 1) * nh * nw];
            let base = b * 4 * band_stride + c * oh * ow;
            for y in 0..oh {
                for xx in 0..ow {
                    let o = base + y * ow + xx;
                    let (ll, lh, hl, hh) = (
                        src[o],
                        src[o + band_stride],
                        src[o + 2 * band_stride],
                        src[o + 3 * band_stride],
                    );
                    let i = 2 * y * nw + 2 * xx;
                    plane[i] = (ll + lh + hl + hh) * half;
                    plane[i + 1] = (ll - lh + hl - hh) * half;
                    plane[i + nw] = (ll + lh - hl - hh) * half;
                    plane[i + nw + 1] = (ll - lh - hl + hh) * half;
                }
            }
        }
    }
    Ok(out)
}

pub fn dwt_haar<T: Scalar>(x: &Tensor<T>) -> Result<WaveletBands<T>> {
    let mut bands = unstack_bands(&analysis_stacked(x)?)?;
    bands.source_shape = x.shape();
    Ok(bands)
}

pub fn idwt_haar<T: Scalar>(bands: &WaveletBands<T>) -> Result<Tensor<T>> {
    bands.check()?;
    synthesis_stacked(&stack_bands(bands))
}

/// Concatenates the bands along channels in `[LL, LH, HL, HH]` order.
pub fn stack_bands<T: Scalar>(bands: &WaveletBands<T>) -> Tensor<T> {
    let s = bands.ll.shape();
    let per = s.c() * s.plane();
    let mut data = Vec::with_capacity(4 * s.numel());
    for b in 0..s.b() {
        for band in bands.bands() {
            data.extend_from_slice(&band.data()[b * per..(b + 1) * per]);
        }
    }
    Tensor::from_vec([s.b(), 4 * s.c(), s.h(), s.w()], data).expect("stacked shape")
}

pub fn unstack_bands<T: Scalar>(x: &Tensor<T>) -> Result<WaveletBands<T>> {
    let s = x.shape();
    if !s.c().is_multiple_of(4) {
        return Err(Error::Indivisible { channels: s.c(), parts: 4 });
    }
    let c = s.c() / 4;
    let per = c * s.plane();
    let band = |k: usize| {
        let mut data = Vec::with_capacity(s.b() * per);
        for b in 0..s.b() {
            let base = (4 * b + k) * per;
            data.extend_from_slice(&x.data()[base..base + per]);
        }
        Tensor::from_vec([s.b(), c, s.h(), s.w()], data).expect("band shape")
    };
    Ok(WaveletBands {
        ll: band(0),
        lh: band(1),
        hl: band(2),
        hh: band(3),
        source_shape: Shape::new(s.b(), c, 2 * s.h(), 2 * s.w()),
    })
}

/// Fraction of squared energy carried by each band, `[LL, LH, HL, HH]`.
pub fn subband_energy<T: Scalar>(bands: &WaveletBands<T>) -> Result<[f64; 4]> {
    let e = bands.bands().map(|b| b.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>());
    let total: f64 = e.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroEnergy);
    }
    Ok(e.map(|v| v / total))
}

/// Graph-level analysis returning the stacked bands.
pub fn dwt<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.haar_analysis(x)
}

/// Graph-level synthesis from stacked bands.
pub fn idwt<T: Scalar>(g: &mut Graph<T>, stacked: Var) -> Result<Var> {
    g.haar_synthesis(stacked)
}
