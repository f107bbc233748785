//! Width-bucketed IoU and PSNR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Width bucket of a nominal stroke width: `{1, 2}` → 0–2 px, `{3, 4}` → 2–4 px.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bucket {
    #[serde(rename = "0-2")]
    Thin,
    #[serde(rename = "2-4")]
    Thick,
}

impl Bucket {
    pub fn of_width(width: usize) -> Option<Bucket> {
        match width {
            1 | 2 => Some(Bucket::Thin),
            3 | 4 => Some(Bucket::Thick),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::Thin => "0-2",
            Bucket::Thick => "2-4",
        }
    }
}

/// Micro-aggregated intersection and union counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouAccumulator {
    pub intersection: u64,
    pub union: u64,
    pub images: u64,
}

impl IouAccumulator {
    pub fn add(&mut self, pred: &[bool], truth: &[bool]) {
        for (&p, &t) in pred.iter().zip(truth) {
            self.intersection += (p && t) as u64;
            self.union += (p || t) as u64;
        }
        self.images += 1;
    }

    /// `Σ|P∩G| / Σ|P∪G|`; an empty total union counts as perfect agreement.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub iou_overall: f64,
    pub iou_0_2: f64,
    pub iou_2_4: f64,
    pub images_0_2: u64,
    pub images_2_4: u64,
}

/// IoU of thresholded probabilities against binary masks, overall and per
/// width bucket. `probs`, `masks` and `widths` are aligned per image.
pub fn segmentation_metrics(
    probs: &[Tensor<f32>],
    masks: &[Tensor<f32>],
    widths: &[usize],
    threshold: f32,
) -> Result<SegmentationMetrics> {
    if probs.len() != masks.len() || masks.len() != widths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions, {} masks, {} widths",
            probs.len(),
            masks.len(),
            widths.len()
        )));
    }
    let mut all = IouAccumulator::default();
    let mut thin = IouAccumulator::default();
    let mut thick = IouAccumulator::default();
    for ((p, m), &w) in probs.iter().zip(masks).zip(widths) {
        if p.shape() != m.shape() {
            return Err(Error::shape("iou", format!("{} vs {}", p.shape(), m.shape())));
        }
        let pred: Vec<bool> = p.data().iter().map(|&v| v > threshold).collect();
        let truth: Vec<bool> = m.data().iter().map(|&v| v > 0.5).collect();
        all.add(&pred, &truth);
        match Bucket::of_width(w) {
            Some(Bucket::Thin) => thin.add(&pred, &truth),
            Some(Bucket::Thick) => thick.add(&pred, &truth),
            None => {}
        }
    }
    Ok(SegmentationMetrics {
        iou_overall: all.iou(),
        iou_0_2: thin.iou(),
        iou_2_4: thick.iou(),
        images_0_2: thin.images,
        images_2_4: thick.images,
    })
}

/// `−10·log10(MSE)` on the `[0, 1]` range; `pred` is clamped to `[0, 1]`
/// first and identical images give [`PSNR_CAP`].
pub fn psnr(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("psnr", format!("{} vs {}", pred.shape(), truth.shape())));
    }
    let se: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| (p.clamp(0.0, 1.0) as f64 - t as f64).powi(2))
        .sum();
    let mse = se / pred.numel().max(1) as f64;
    Ok(if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    })
}

pub fn mean_psnr(preds: &[Tensor<f32>], truths: &[Tensor<f32>]) -> Result<f64> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} targets",
            preds.len(),
            truths.len()
        )));
    }
    let mut sum = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        sum += psnr(p, t)?;
    }
    Ok(sum / preds.len() as f64)
}
