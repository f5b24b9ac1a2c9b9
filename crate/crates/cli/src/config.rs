//! Run configuration file and model files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dpgrad::data::{load_csv, load_idx, make_blobs, Dataset, TargetKind};
use dpgrad::nn::{LayerDescriptor, LossKind};
use dpgrad::optimizer::NoiseSchedule;
use dpgrad::RngStream;

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Dp,
    /// Ordinary minibatch SGD on uniformly shuffled batches of size `q * N`.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian blobs generated from the data seed.
    Blobs {
        n: usize,
        #[serde(default = "two")]
        dim: usize,
        #[serde(default = "two")]
        classes: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    Csv {
        path: PathBuf,
        feature_columns: Vec<String>,
        target_column: String,
        #[serde(default = "default_target_kind")]
        target_kind: TargetKind,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

fn two() -> usize {
    2
}

fn default_separation() -> f64 {
    3.0
}

fn default_target_kind() -> TargetKind {
    TargetKind::Classes
}

fn default_epochs() -> usize {
    1
}

fn default_delta() -> f64 {
    1e-5
}

fn default_max_grad_norm() -> f64 {
    1.0
}

fn default_learning_rate() -> f64 {
    0.1
}

/// Everything a training run needs. Exactly one of `noise_multiplier` and
/// `target_epsilon`, one of `model_file` and `layers`, and one of
/// `sample_rate` and `logical_batch` must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model_file: Option<PathBuf>,
    #[serde(default)]
    pub layers: Option<Vec<LayerDescriptor>>,
    pub dataset: DatasetSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub sample_rate: Option<f64>,
    #[serde(default)]
    pub logical_batch: Option<usize>,
    /// Largest batch pushed through one forward/backward pass.
    #[serde(default)]
    pub physical_batch: Option<usize>,
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
    #[serde(default)]
    pub target_epsilon: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed_data: Option<u64>,
    #[serde(default)]
    pub seed_noise: Option<u64>,
    #[serde(default)]
    pub secure_mode: bool,
    #[serde(default)]
    pub noise_schedule: Option<NoiseSchedule>,
    #[serde(default)]
    pub loss: Option<LossKind>,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Minimal configuration around a dataset; everything else defaults.
    pub fn new(dataset: DatasetSpec, layers: Vec<LayerDescriptor>) -> Self {
        Self {
            model_file: None,
            layers: Some(layers),
            dataset,
            epochs: default_epochs(),
            sample_rate: None,
            logical_batch: None,
            physical_batch: None,
            noise_multiplier: None,
            target_epsilon: None,
            delta: default_delta(),
            max_grad_norm: default_max_grad_norm(),
            learning_rate: default_learning_rate(),
            seed_data: None,
            seed_noise: None,
            secure_mode: false,
            noise_schedule: None,
            loss: None,
            mode: TrainMode::Dp,
            out: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.model_file.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.out.as_mut() {
            resolve(p);
        }
        match &mut cfg.dataset {
            DatasetSpec::Csv { path, .. } => resolve(path),
            DatasetSpec::Idx { images, labels } => {
                resolve(images);
                resolve(labels);
            }
            DatasetSpec::Blobs { .. } => {}
        }
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.noise_multiplier.is_some() == self.target_epsilon.is_some() && self.mode == TrainMode::Dp {
            return Err(config_err("give exactly one of noise_multiplier and target_epsilon"));
        }
        if self.model_file.is_some() == self.layers.is_some() {
            return Err(config_err("give exactly one of model_file and layers"));
        }
        if self.sample_rate.is_some() == self.logical_batch.is_some() {
            return Err(config_err("give exactly one of sample_rate and logical_batch"));
        }
        if self.epochs == 0 {
            return Err(config_err("epochs must be positive"));
        }
        if self.physical_batch == Some(0) || self.logical_batch == Some(0) {
            return Err(config_err("batch sizes must be positive"));
        }
        if self.secure_mode && self.seed_noise.is_some() {
            return Err(config_err("secure mode draws noise from the OS generator and refuses a noise seed"));
        }
        if self.target_epsilon.is_some() && self.noise_schedule.as_ref().is_some_and(|s| *s != NoiseSchedule::Constant) {
            return Err(config_err("target_epsilon calibration supports only the constant noise schedule"));
        }
        if let Some(s) = &self.noise_schedule {
            s.validate()?;
        }
        Ok(())
    }

    pub fn descriptors(&self) -> Result<Vec<LayerDescriptor>> {
        match (&self.layers, &self.model_file) {
            (Some(l), _) => Ok(l.clone()),
            (None, Some(path)) => load_model_file(path),
            (None, None) => Err(config_err("no model given")),
        }
    }

    /// Sample rate, derived from the logical batch when needed.
    pub fn sample_rate_for(&self, n: usize) -> Result<f64> {
        let q = match (self.sample_rate, self.logical_batch) {
            (Some(q), _) => q,
            (None, Some(b)) => b as f64 / n as f64,
            (None, None) => return Err(config_err("no sample rate given")),
        };
        if q > 0.0 && q <= 1.0 {
            Ok(q)
        } else {
            Err(config_err(format!("sample rate must lie in (0, 1], got {q}")))
        }
    }

    pub fn load_dataset(&self, data_seed: u64) -> Result<Dataset<f32>> {
        Ok(match &self.dataset {
            DatasetSpec::Blobs { n, dim, classes, separation } => {
                make_blobs(*n, *dim, *classes, *separation, &mut RngStream::seeded(data_seed))?
            }
            DatasetSpec::Csv { path, feature_columns, target_column, target_kind } => {
                load_csv(path, feature_columns, target_column, *target_kind)?
            }
            DatasetSpec::Idx { images, labels } => load_idx(images, labels)?,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    layers: Vec<LayerDescriptor>,
}

/// A model file is a JSON list of layer descriptors, or an object with a
/// `layers` list.
pub fn parse_model(text: &str) -> Result<Vec<LayerDescriptor>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    Ok(if value.is_array() {
        serde_json::from_value(value)?
    } else {
        serde_json::from_value::<ModelFile>(value)?.layers
    })
}

pub fn load_model_file(path: &Path) -> Result<Vec<LayerDescriptor>> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    parse_model(&text)
}
