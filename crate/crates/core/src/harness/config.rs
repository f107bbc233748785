//! Experiment configuration files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{DatasetSpec, Task};
use crate::blocks::{HeadKind, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::optim::AdamConfig;
use crate::tensor::DType;

/// Environment variable that overrides both the model and the data seed.
pub const SEED_ENV: &str = "SUPER_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Bce,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Seed for parameter initialization and the per-epoch shuffle.
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `bce` for thin lines and `mse` for denoising.
    #[serde(default)]
    pub loss: Option<Loss>,
    /// Evaluate on the test split every this many epochs; 0 evaluates only
    /// after the last epoch.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "d_dtype")]
    pub dtype: DType,
}

fn d_epochs() -> usize {
    30
}
fn d_batch() -> usize {
    8
}
fn d_dtype() -> DType {
    DType::F32
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: d_epochs(),
            batch_size: d_batch(),
            adam: AdamConfig::default(),
            seed: 0,
            loss: None,
            eval_every: 0,
            dtype: d_dtype(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Reference desk-scale setup for a task: depth 2, stem 8, 64×64 images,
    /// 500/100 split, 30 epochs.
    pub fn reference(task: Task) -> Self {
        let mut model = ModelSpec::new(2, 8, Default::default());
        if task == Task::Denoise {
            model.head = HeadKind::Residual;
        }
        ExperimentConfig {
            model,
            dataset: DatasetSpec::new(task),
            train: TrainConfig::default(),
        }
    }

    pub fn loss(&self) -> Loss {
        self.train.loss.unwrap_or(match self.dataset.task {
            Task::ThinLines => Loss::Bce,
            Task::Denoise => Loss::Mse,
        })
    }

    /// Cross-field checks; errors name the offending field path.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| nest("model", e))?;
        self.dataset.validate().map_err(|e| nest("dataset", e))?;
        if self.model.in_channels != 1 {
            return Err(Error::config("model.in_channels", "synthetic images have one channel"));
        }
        if !self.dataset.size.is_multiple_of(1 << self.model.depth) {
            return Err(Error::config(
                "dataset.size",
                format!("{} not divisible by 2^{}", self.dataset.size, self.model.depth),
            ));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.batch_size > self.dataset.train_count {
            return Err(Error::config(
                "train.batch_size",
                format!("must be in 1..={}", self.dataset.train_count),
            ));
        }
        if self.dataset.test_count == 0 {
            return Err(Error::config("dataset.test_count", "must be positive"));
        }
        let a = &t.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(Error::config("train.adam.lr", "must be finite and non-negative"));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::config("train.adam", "betas must lie in [0, 1)"));
        }
        if !(a.eps > 0.0) {
            return Err(Error::config("train.adam.eps", "must be positive"));
        }
        match (self.dataset.task, self.loss()) {
            (Task::ThinLines, Loss::Bce) | (Task::Denoise, Loss::Mse) => {}
            (task, loss) => {
                return Err(Error::config(
                    "train.loss",
                    format!("{loss:?} does not match task {}", task.name()),
                ))
            }
        }
        if self.dataset.task == Task::ThinLines && self.model.head != HeadKind::Logit {
            return Err(Error::config("model.head", "thin_lines needs a logit head"));
        }
        Ok(())
    }

    /// Replaces both seeds with `SUPER_SEED` when it is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer")))?;
            self.train.seed = seed;
            self.dataset.seed = seed;
        }
        Ok(())
    }
}

fn nest(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { path, message } => Error::config(format!("{prefix}.{path}"), message),
        other => Error::config(prefix, other.to_string()),
    }
}

/// Parses a JSON document, reporting the field path of the first error.
pub fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path.is_empty() { ".".to_string() } else { path }, e.into_inner().to_string())
    })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = parse_json(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, parses, applies `SUPER_SEED`, then validates.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg: ExperimentConfig = parse_json(&text)?;
    cfg.apply_seed_env()?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(
            r#"{"model": {"depth": 2, "stem_channels": 8}, "dataset": {"task": "thin_lines"}}"#,
        )
        .unwrap();
        assert_eq!(cfg, ExperimentConfig::reference(Task::ThinLines));
        assert_eq!(cfg.loss(), Loss::Bce);
    }

    #[test]
    fn errors_carry_field_path() {
        let err = parse_config(r#"{"model": {"depth": "two", "stem_channels": 8}, "dataset": {"task": "thin_lines"}}"#)
            .unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "model.depth"),
            e => panic!("{e}"),
        }
        let err = parse_config(
            r#"{"model": {"depth": 2, "stem_channels": 8}, "dataset": {"task": "denoise"}, "train": {"loss": "bce"}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "train.loss"), "{err}");
        let err = parse_config(r#"{"model": {"depth": 3, "stem_channels": 8}, "dataset": {"task": "thin_lines", "size": 4}}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "dataset.size"), "{err}");
    }
}
