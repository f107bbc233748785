//! Synthetic datasets: thin dark strokes on textured backgrounds, and
//! smooth images with additive Gaussian noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, UpsampleMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ThinLines,
    Denoise,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::ThinLines => "thin_lines",
            Task::Denoise => "denoise",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub task: Task,
    #[serde(default = "d_train")]
    pub train_count: usize,
    #[serde(default = "d_test")]
    pub test_count: usize,
    /// Image side length in pixels.
    #[serde(default = "d_size")]
    pub size: usize,
    #[serde(default = "d_wmin")]
    pub width_min: usize,
    #[serde(default = "d_wmax")]
    pub width_max: usize,
    #[serde(default = "d_lmin")]
    pub lines_min: usize,
    #[serde(default = "d_lmax")]
    pub lines_max: usize,
    /// Upper bound on the summed amplitude of the background sinusoids.
    #[serde(default = "d_texture")]
    pub texture_amplitude: f64,
    #[serde(default = "d_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_train() -> usize {
    500
}
fn d_test() -> usize {
    100
}
fn d_size() -> usize {
    64
}
fn d_wmin() -> usize {
    1
}
fn d_wmax() -> usize {
    4
}
fn d_lmin() -> usize {
    1
}
fn d_lmax() -> usize {
    3
}
fn d_texture() -> f64 {
    0.1
}
fn d_sigma() -> f64 {
    0.1
}

/// Stream offset of test items, so train and test never share a draw.
const TEST_STREAM: u64 = 1 << 32;
/// Mean background level.
const BACKGROUND: f64 = 0.7;
/// Darkening applied at full stroke coverage, drawn per stroke from this range.
const CONTRAST: (f64, f64) = (0.35, 0.55);

impl DatasetSpec {
    pub fn new(task: Task) -> Self {
        DatasetSpec {
            task,
            train_count: d_train(),
            test_count: d_test(),
            size: d_size(),
            width_min: d_wmin(),
            width_max: d_wmax(),
            lines_min: d_lmin(),
            lines_max: d_lmax(),
            texture_amplitude: d_texture(),
            noise_sigma: d_sigma(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, m: &str| Err(Error::config(field, m));
        if self.size < 2 || !self.size.is_power_of_two() {
            return bad("size", "must be a power of two >= 2");
        }
        if self.width_min == 0 || self.width_min > self.width_max {
            return bad("width_min", "need 1 <= width_min <= width_max");
        }
        if self.lines_min == 0 || self.lines_min > self.lines_max {
            return bad("lines_min", "need 1 <= lines_min <= lines_max");
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude.is_finite()) {
            return bad("texture_amplitude", "must be finite and non-negative");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be finite and non-negative");
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThinLineSample {
    /// `[1, 1, S, S]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, 1, S, S]` with entries in `{0, 1}`.
    pub mask: Tensor<f32>,
    /// Nominal stroke width in pixels.
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoisePair {
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    ThinLines(Vec<ThinLineSample>),
    Denoise(Vec<DenoisePair>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::ThinLines(v) => v.len(),
            Samples::Denoise(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Network input of item `i`.
    pub fn input(&self, i: usize) -> &Tensor<f32> {
        match self {
            Samples::ThinLines(v) => &v[i].image,
            Samples::Denoise(v) => &v[i].noisy,
        }
    }

    /// Training target of item `i`.
    pub fn target(&self, i: usize) -> &Tensor<f32> {
        match self {
            Samples::ThinLines(v) => &v[i].mask,
            Samples::Denoise(v) => &v[i].clean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Samples,
    pub test: Samples,
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(match spec.task {
        Task::ThinLines => Dataset {
            train: Samples::ThinLines(gen_thin_lines(spec, 0, spec.train_count)),
            test: Samples::ThinLines(gen_thin_lines(spec, TEST_STREAM, spec.test_count)),
        },
        Task::Denoise => Dataset {
            train: Samples::Denoise(gen_denoise(spec, 0, spec.train_count)),
            test: Samples::Denoise(gen_denoise(spec, TEST_STREAM, spec.test_count)),
        },
    })
}

/// Distance from `p` to the segment `a–b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Rasterizes one polyline of nominal `width` on a `size × size` grid with
/// pixel centres at integer coordinates `(x, y)`.
///
/// Returns `(coverage, mask)`: coverage is the anti-aliased ink fraction
/// `clamp(w/2 + 1/2 − d, 0, 1)` and the mask marks centres with `d ≤ w/2`,
/// where `d` is the distance to the centreline. Row-major, `y` outer.
pub fn rasterize_polyline(size: usize, points: &[(f64, f64)], width: f64) -> (Vec<f64>, Vec<bool>) {
    let mut coverage = vec![0.0; size * size];
    let mut mask = vec![false; size * size];
    let half = width / 2.0;
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64, y as f64);
            let d = points
                .windows(2)
                .map(|s| segment_distance(p, s[0], s[1]))
                .fold(f64::INFINITY, f64::min);
            let i = y * size + x;
            coverage[i] = (half + 0.5 - d).clamp(0.0, 1.0);
            mask[i] = d <= half;
        }
    }
    (coverage, mask)
}

fn background(size: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.gen_range(1..=3usize);
    let waves: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            let a = rng.gen_range(0.0..=amplitude / n as f64);
            let fx = rng.gen_range(-3.0..3.0);
            let fy = rng.gen_range(-3.0..3.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (a, fx, fy, phase)
        })
        .collect();
    let s = size as f64;
    let mut out = vec![BACKGROUND; size * size];
    for y in 0..size {
        for x in 0..size {
            for &(a, fx, fy, ph) in &waves {
                out[y * size + x] += a * (2.0 * PI * (fx * x as f64 + fy * y as f64) / s + ph).sin();
            }
        }
    }
    out
}

fn random_polyline(size: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let s = size as f64;
    let vertices = rng.gen_range(2..=4usize);
    // start on one edge, wander across
    let mut pts = Vec::with_capacity(vertices);
    let vertical = rng.gen_bool(0.5);
    for j in 0..vertices {
        let along = s * j as f64 / (vertices - 1) as f64 - 0.5 + rng.gen_range(-0.1..0.1) * s;
        let across = rng.gen_range(0.1 * s..0.9 * s);
        pts.push(if vertical { (across, along) } else { (along, across) });
    }
    pts
}

fn to_tensor(size: usize, data: impl Iterator<Item = f64>) -> Tensor<f32> {
    Tensor::from_vec([1, 1, size, size], data.map(|v| v as f32).collect()).expect("image shape")
}

/// Thin-line items `0..count` on the given stream base. Each item is a pure
/// function of `(spec, base, index)`.
pub fn gen_thin_lines(spec: &DatasetSpec, base: u64, count: usize) -> Vec<ThinLineSample> {
    let s = spec.size;
    (0..count)
        .map(|i| {
            let mut rng = spec.rng(base + i as u64);
            let width = rng.gen_range(spec.width_min..=spec.width_max);
            let mut image = background(s, spec.texture_amplitude, &mut rng);
            let mut mask = vec![false; s * s];
            let lines = rng.gen_range(spec.lines_min..=spec.lines_max);
            for _ in 0..lines {
                let pts = random_polyline(s, &mut rng);
                let contrast = rng.gen_range(CONTRAST.0..CONTRAST.1);
                let (cov, m) = rasterize_polyline(s, &pts, width as f64);
                for j in 0..s * s {
                    image[j] -= contrast * cov[j];
                    mask[j] |= m[j];
                }
            }
            ThinLineSample {
                image: to_tensor(s, image.into_iter().map(|v| v.clamp(0.0, 1.0))),
                mask: to_tensor(s, mask.into_iter().map(|m| if m { 1.0 } else { 0.0 })),
                width,
            }
        })
        .collect()
}

/// A smooth image: uniform noise on an `S/8` grid, bilinearly upsampled
/// ×8 and rescaled to `[0.1, 0.9]`.
fn smooth_image(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut coarse = size;
    let mut levels = 0;
    while coarse > 1 && levels < 3 {
        coarse /= 2;
        levels += 1;
    }
    let base = Tensor::<f64>::rand_uniform([1, 1, coarse, coarse], 0.0, 1.0, rng);
    let mut g = Graph::new();
    let mut v = g.constant(base);
    for _ in 0..levels {
        v = g.upsample2(v, UpsampleMode::Bilinear);
    }
    let data = g.value(v).data().to_vec();
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = (hi - lo).max(1e-12);
    data.into_iter().map(|x| 0.1 + 0.8 * (x - lo) / span).collect()
}

/// Denoising pairs `0..count` on the given stream base.
pub fn gen_denoise(spec: &DatasetSpec, base: u64, count: usize) -> Vec<DenoisePair> {
    let s = spec.size;
    (0..count)
        .map(|i| {
            let mut rng = spec.rng(base + i as u64);
            let clean = smooth_image(s, &mut rng);
            let noisy: Vec<f64> = if spec.noise_sigma == 0.0 {
                clean.clone()
            } else {
                let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma is finite");
                clean
                    .iter()
                    .map(|&c| (c + normal.sample(&mut rng)).clamp(0.0, 1.0))
                    .collect()
            };
            DenoisePair {
                noisy: to_tensor(s, noisy.into_iter()),
                clean: to_tensor(s, clean.into_iter()),
            }
        })
        .collect()
}
