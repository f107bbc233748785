//! Paired-seed SUPER vs baseline comparisons.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::Task;
use super::train::{run_experiment, EvalMetrics, Experiment, MetricsReport};
use crate::blocks::DecoderKind;
use crate::error::Result;

/// Non-inferiority margin on the 0–2 px IoU.
pub const IOU_MARGIN: f64 = 0.01;
/// Non-inferiority margin on PSNR, in dB.
pub const PSNR_MARGIN: f64 = 0.1;
/// Both denoisers must beat the noisy input by at least this many dB.
pub const MIN_PSNR_GAIN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub seed: u64,
    pub super_report: MetricsReport,
    pub baseline_report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub task: Task,
    pub seeds: Vec<u64>,
    /// `iou_0_2` for thin lines, PSNR for denoising.
    pub metric: String,
    pub super_mean: f64,
    pub baseline_mean: f64,
    /// Mean over seeds of `super − baseline`.
    pub paired_mean_difference: f64,
    pub margin: f64,
    pub non_inferior: bool,
    /// Mean PSNR of the noisy inputs; denoising only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub input_psnr: Option<f64>,
    /// Whether both decoders beat the input by the required gain; denoising only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub both_denoise: Option<bool>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: Vec<PairedRun>,
    pub summary: ComparisonSummary,
}

/// Config of one arm: both seeds set to `seed`, decoder swapped.
pub fn arm(base: &ExperimentConfig, seed: u64, decoder: DecoderKind) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.model.decoder = decoder;
    cfg.train.seed = seed;
    cfg.dataset.seed = seed;
    cfg
}

/// Trains both decoders for every seed. `on_run` sees each finished run,
/// for example to save it.
pub fn compare_with(
    base: &ExperimentConfig,
    seeds: &[u64],
    mut on_run: impl FnMut(u64, DecoderKind, &Experiment) -> Result<()>,
) -> Result<Comparison> {
    base.validate()?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut reports = Vec::with_capacity(2);
        for decoder in [DecoderKind::Super, DecoderKind::Baseline] {
            let e = run_experiment(&arm(base, seed, decoder))?;
            on_run(seed, decoder, &e)?;
            reports.push(e.report);
        }
        let baseline_report = reports.pop().expect("two arms");
        let super_report = reports.pop().expect("two arms");
        runs.push(PairedRun {
            seed,
            super_report,
            baseline_report,
        });
    }
    let summary = summarize(base.dataset.task, &runs);
    Ok(Comparison { runs, summary })
}

pub fn compare(base: &ExperimentConfig, seeds: &[u64]) -> Result<Comparison> {
    compare_with(base, seeds, |_, _, _| Ok(()))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

pub fn summarize(task: Task, runs: &[PairedRun]) -> ComparisonSummary {
    let head = |r: &MetricsReport| r.final_metrics.headline();
    let super_mean = mean(runs.iter().map(|r| head(&r.super_report)));
    let baseline_mean = mean(runs.iter().map(|r| head(&r.baseline_report)));
    let diff = mean(runs.iter().map(|r| head(&r.super_report) - head(&r.baseline_report)));
    let (metric, margin) = match task {
        Task::ThinLines => ("iou_0_2", IOU_MARGIN),
        Task::Denoise => ("psnr", PSNR_MARGIN),
    };
    let non_inferior = super_mean >= baseline_mean - margin;
    let (input_psnr, both_denoise) = match task {
        Task::ThinLines => (None, None),
        Task::Denoise => {
            let input = mean(runs.iter().map(|r| match r.super_report.final_metrics {
                EvalMetrics::Denoise(m) => m.input_psnr,
                EvalMetrics::Segmentation(_) => f64::NAN,
            }));
            let ok = super_mean >= input + MIN_PSNR_GAIN && baseline_mean >= input + MIN_PSNR_GAIN;
            (Some(input), Some(ok))
        }
    };
    ComparisonSummary {
        task,
        seeds: runs.iter().map(|r| r.seed).collect(),
        metric: metric.to_string(),
        super_mean,
        baseline_mean,
        paired_mean_difference: diff,
        margin,
        non_inferior,
        input_psnr,
        both_denoise,
        pass: non_inferior && both_denoise.unwrap_or(true),
    }
}

impl Comparison {
    /// `seed,decoder,bucket,iou` (buckets overall, 0-2, 2-4) or
    /// `seed,decoder,psnr`, one row per run.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        match self.summary.task {
            Task::ThinLines => w.write_record(["seed", "decoder", "bucket", "iou"])?,
            Task::Denoise => w.write_record(["seed", "decoder", "psnr"])?,
        }
        for run in &self.runs {
            for r in [&run.super_report, &run.baseline_report] {
                let seed = run.seed.to_string();
                let dec = r.decoder.name();
                match r.final_metrics {
                    EvalMetrics::Segmentation(m) => {
                        for (bucket, iou) in [("overall", m.iou_overall), ("0-2", m.iou_0_2), ("2-4", m.iou_2_4)] {
                            w.write_record([seed.as_str(), dec, bucket, &iou.to_string()])?;
                        }
                    }
                    EvalMetrics::Denoise(m) => w.write_record([seed.as_str(), dec, &m.psnr.to_string()])?,
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}
