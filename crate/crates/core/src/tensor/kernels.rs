//! Forward and adjoint kernels behind the graph ops.
//!
//! Every reduction runs in a fixed sequential order so repeated calls are
//! bitwise reproducible.

use super::{PoolKind, Scalar, Shape, Tensor, UpsampleMode};
use crate::error::{Error, Result};

/// Row-major-or-strided matrix view for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn transposed(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `out ← a·b + beta·out` with `out` row-major `[a.rows × b.cols]`.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.fits() && b.fits(), "gemm operand view out of bounds");
    assert!(out.len() >= a.rows * b.cols, "gemm output too small");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, stride: usize, padding: usize) -> Result<Self> {
        let [_, cin, h, w] = input.0;
        let [_, wcin, kh, kw] = weight.0;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin} != weight in-channels {wcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < kh {
            return Err(Error::shape("conv2d", format!("padded height {span_h} < kernel height {kh}")));
        }
        if span_w < kw {
            return Err(Error::shape("conv2d", format!("padded width {span_w} < kernel width {kw}")));
        }
        if !(span_h - kh).is_multiple_of(stride) {
            return Err(Error::shape("conv2d", format!("height {h} not tiled by stride {stride}")));
        }
        if !(span_w - kw).is_multiple_of(stride) {
            return Err(Error::shape("conv2d", format!("width {w} not tiled by stride {stride}")));
        }
        Ok(ConvGeometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh: (span_h - kh) / stride + 1,
            ow: (span_w - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        // input index = o*stride + k - padding must lie in [0, extent)
        let lo = if k >= self.padding {
            0
        } else {
            (self.padding - k).div_ceil(self.stride).min(out)
        };
        let hi = if extent + self.padding > k {
            ((extent + self.padding - k - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let n = self.n();
        for ic in 0..self.cin {
            let plane = &x[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (oy_lo, oy_hi) = self.valid(ky, self.h, self.oh);
                for kx in 0..self.kw {
                    let (ox_lo, ox_hi) = self.valid(kx, self.w, self.ow);
                    let row = (ic * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    dst.fill(T::zero());
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if ox_lo == ox_hi {
                            continue;
                        }
                        if self.stride == 1 {
                            let ix0 = ox_lo + kx - self.padding;
                            out_row[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] = src[ox * self.stride + kx - self.padding];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let n = self.n();
        for ic in 0..self.cin {
            let plane = &mut dx[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (oy_lo, oy_hi) = self.valid(ky, self.h, self.oh);
                for kx in 0..self.kw {
                    let (ox_lo, ox_hi) = self.valid(kx, self.w, self.ow);
                    let row = (ic * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let src_row = &src[oy * self.ow..(oy + 1) * self.ow];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * self.stride + kx - self.padding;
                            dst[ix] = dst[ix] + src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(x.shape(), weight.shape(), stride, padding)?;
    let cout = weight.shape().b();
    if let Some(bias) = bias {
        if bias.numel() != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} != output channels {cout}", bias.numel()),
            ));
        }
    }
    let batch = x.shape().b();
    let (k, n) = (geo.k(), geo.n());
    let mut out = Tensor::zeros([batch, cout, geo.oh, geo.ow]);
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
    let in_per = geo.cin * geo.h * geo.w;
    let wmat = MatRef::row_major(weight.data(), cout, k);
    for b in 0..batch {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let colmat = if geo.is_pointwise() {
            MatRef::row_major(xb, k, n)
        } else {
            geo.im2col(xb, &mut cols);
            MatRef::row_major(&cols, k, n)
        };
        let ob = &mut out.data_mut()[b * cout * n..(b + 1) * cout * n];
        gemm(wmat, colmat, T::zero(), ob);
        if let Some(bias) = bias {
            for (oc, row) in ob.chunks_exact_mut(n).enumerate() {
                let bv = bias.data()[oc];
                for v in row {
                    *v = *v + bv;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let geo = ConvGeometry::new(x.shape(), weight.shape(), stride, padding)?;
    let cout = weight.shape().b();
    let batch = x.shape().b();
    let (k, n) = (geo.k(), geo.n());
    let in_per = geo.cin * geo.h * geo.w;
    let [need_x, need_w, need_b] = need;

    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_w.then(|| Tensor::zeros(weight.shape()));
    let mut db = need_b.then(|| Tensor::zeros([cout, 1, 1, 1]));
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
    let mut dcols = if need_x && !geo.is_pointwise() { vec![T::zero(); k * n] } else { Vec::new() };
    let wmat = MatRef::row_major(weight.data(), cout, k);

    for b in 0..batch {
        let dyb = MatRef::row_major(&dy.data()[b * cout * n..(b + 1) * cout * n], cout, n);
        if let Some(db) = db.as_mut() {
            for (oc, row) in dyb.data.chunks_exact(n).enumerate() {
                let s = row.iter().fold(T::zero(), |acc, &v| acc + v);
                db.data_mut()[oc] = db.data()[oc] + s;
            }
        }
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        if let Some(dw) = dw.as_mut() {
            let colmat = if geo.is_pointwise() {
                MatRef::row_major(xb, k, n)
            } else {
                geo.im2col(xb, &mut cols);
                MatRef::row_major(&cols, k, n)
            };
            gemm(dyb, colmat.transposed(), T::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[b * in_per..(b + 1) * in_per];
            if geo.is_pointwise() {
                gemm(wmat.transposed(), dyb, T::one(), dxb);
            } else {
                gemm(wmat.transposed(), dyb, T::zero(), &mut dcols);
                geo.col2im_add(&dcols, dxb);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Pool forward. Returns the output and, for max kinds, the flat input
/// index chosen for each output element (first maximum in scan order).
pub(crate) fn pool_forward<T: Scalar>(kind: PoolKind, x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [nb, nc, nh, nw] = x.shape().0;
    let plane = nh * nw;
    match kind {
        PoolKind::GlobalAvg => {
            let inv = T::lit(1.0 / plane as f64);
            let data = x
                .data()
                .chunks_exact(plane)
                .map(|p| p.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
                .collect();
            (Tensor::from_vec([nb, nc, 1, 1], data).expect("pool shape"), Vec::new())
        }
        PoolKind::GlobalMax => {
            let mut arg = Vec::with_capacity(nb * nc);
            let data = x
                .data()
                .chunks_exact(plane)
                .enumerate()
                .map(|(i, p)| {
                    let mut best = 0;
                    for (j, &v) in p.iter().enumerate() {
                        if v > p[best] {
                            best = j;
                        }
                    }
                    arg.push(i * plane + best);
                    p[best]
                })
                .collect();
            (Tensor::from_vec([nb, nc, 1, 1], data).expect("pool shape"), arg)
        }
        PoolKind::ChannelMean => {
            let inv = T::lit(1.0 / nc as f64);
            let mut out = Tensor::zeros([nb, 1, nh, nw]);
            for b in 0..nb {
                let dst = &mut out.data_mut()[b * plane..(b + 1) * plane];
                for c in 0..nc {
                    let src = &x.data()[(b * nc + c) * plane..(b * nc + c + 1) * plane];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                for d in dst {
                    *d = *d * inv;
                }
            }
            (out, Vec::new())
        }
        PoolKind::ChannelMax => {
            let mut out = Tensor::zeros([nb, 1, nh, nw]);
            let mut arg = vec![0; nb * plane];
            for b in 0..nb {
                for p in 0..plane {
                    let mut best = b * nc * plane + p;
                    for c in 1..nc {
                        let i = (b * nc + c) * plane + p;
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                    arg[b * plane + p] = best;
                    out.data_mut()[b * plane + p] = x.data()[best];
                }
            }
            (out, arg)
        }
    }
}

pub(crate) fn pool_backward<T: Scalar>(
    kind: PoolKind,
    input_shape: Shape,
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let [nb, nc, nh, nw] = input_shape.0;
    let plane = nh * nw;
    let mut dx = Tensor::zeros(input_shape);
    match kind {
        PoolKind::GlobalAvg => {
            let inv = T::lit(1.0 / plane as f64);
            for (p, &g) in dx.data_mut().chunks_exact_mut(plane).zip(dy.data()) {
                p.fill(g * inv);
            }
        }
        PoolKind::ChannelMean => {
            let inv = T::lit(1.0 / nc as f64);
            for b in 0..nb {
                let src = &dy.data()[b * plane..(b + 1) * plane];
                for c in 0..nc {
                    let dst = &mut dx.data_mut()[(b * nc + c) * plane..(b * nc + c + 1) * plane];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s * inv;
                    }
                }
            }
        }
        PoolKind::GlobalMax | PoolKind::ChannelMax => {
            for (&i, &g) in argmax.iter().zip(dy.data()) {
                dx.data_mut()[i] = dx.data()[i] + g;
            }
        }
    }
    dx
}

/// Two-tap linear interpolation weights for a ×2 resize with half-pixel
/// centres (`align_corners = false`), clamped at the borders.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Scalar>(mode: UpsampleMode, x: &Tensor<T>) -> Tensor<T> {
    let [nb, nc, nh, nw] = x.shape().0;
    let (oh, ow) = (2 * nh, 2 * nw);
    let mut out = Tensor::zeros([nb, nc, oh, ow]);
    let planes_in = x.data().chunks_exact(nh * nw);
    let planes_out = out.data_mut().chunks_exact_mut(oh * ow);
    match mode {
        UpsampleMode::Nearest => {
            for (src, dst) in planes_in.zip(planes_out) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[(oy / 2) * nw + ox / 2];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(nh);
            let tx = bilinear_taps(nw);
            for (src, dst) in planes_in.zip(planes_out) {
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                        let top = src[y0 * nw + x0] * wx0 + src[y0 * nw + x1] * wx1;
                        let bot = src[y1 * nw + x0] * wx0 + src[y1 * nw + x1] * wx1;
                        dst[oy * ow + ox] = top * wy0 + bot * wy1;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(mode: UpsampleMode, input_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let [_, _, nh, nw] = input_shape.0;
    let (oh, ow) = (2 * nh, 2 * nw);
    let mut dx = Tensor::zeros(input_shape);
    let planes_out = dy.data().chunks_exact(oh * ow);
    let planes_in = dx.data_mut().chunks_exact_mut(nh * nw);
    match mode {
        UpsampleMode::Nearest => {
            for (src, dst) in planes_out.zip(planes_in) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i = (oy / 2) * nw + ox / 2;
                        dst[i] = dst[i] + src[oy * ow + ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(nh);
            let tx = bilinear_taps(nw);
            for (src, dst) in planes_out.zip(planes_in) {
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                        let g = src[oy * ow + ox];
                        dst[y0 * nw + x0] = dst[y0 * nw + x0] + g * wy0 * wx0;
                        dst[y0 * nw + x1] = dst[y0 * nw + x1] + g * wy0 * wx1;
                        dst[y1 * nw + x0] = dst[y1 * nw + x0] + g * wy1 * wx0;
                        dst[y1 * nw + x1] = dst[y1 * nw + x1] + g * wy1 * wx1;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn avg_pool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [nb, nc, nh, nw] = x.shape().0;
    if nh % 2 != 0 || nw % 2 != 0 {
        return Err(Error::OddExtent { height: nh, width: nw });
    }
    let (oh, ow) = (nh / 2, nw / 2);
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros([nb, nc, oh, ow]);
    for (src, dst) in x.data().chunks_exact(nh * nw).zip(out.data_mut().chunks_exact_mut(oh * ow)) {
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * nw + 2 * x;
                dst[y * ow + x] = (src[i] + src[i + 1] + src[i + nw] + src[i + nw + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

pub(crate) fn avg_pool2_backward<T: Scalar>(input_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let [_, _, nh, nw] = input_shape.0;
    let (oh, ow) = (nh / 2, nw / 2);
    let quarter = T::lit(0.25);
    let mut dx = Tensor::zeros(input_shape);
    for (src, dst) in dy.data().chunks_exact(oh * ow).zip(dx.data_mut().chunks_exact_mut(nh * nw)) {
        for y in 0..nh {
            for x in 0..nw {
                dst[y * nw + x] = src[(y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [nb, cin, h, wd] = x.shape().0;
        let [cout, _, kh, kw] = w.shape().0;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        Tensor::from_fn([nb, cout, oh, ow], |b, oc, oy, ox| {
            let mut s = 0.0;
            for ic in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += x.at(b, ic, iy as usize, ix as usize) * w.at(oc, ic, ky, kx);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k, h) in &[(1, 1, 3, 6), (2, 1, 3, 7), (1, 0, 1, 5), (2, 2, 5, 9), (1, 3, 7, 4), (1, 3, 7, 2), (1, 3, 7, 1)] {
            let x = Tensor::<f64>::randn([2, 3, h, h], 1.0, &mut rng);
            let w = Tensor::<f64>::randn([4, 3, k, k], 1.0, &mut rng);
            let fast = conv2d_forward(&x, &w, None, stride, pad).unwrap();
            let slow = conv_naive(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn bilinear_taps_match_half_pixel_rule() {
        let t = bilinear_taps(4);
        assert_eq!(t[0], (0, 1, 1.0, 0.0));
        assert_eq!(t[1], (0, 1, 0.75, 0.25));
        assert_eq!(t[2], (0, 1, 0.25, 0.75));
        assert_eq!(t[7], (3, 3, 0.75, 0.25));
    }
}
