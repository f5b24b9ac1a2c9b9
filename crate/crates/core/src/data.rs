//! Datasets, loaders and batch samplers.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, DpError, Result};
use crate::nn::Targets;
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Samples along the leading axis of `features`, one target per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar = f32> {
    pub features: Tensor<T>,
    pub targets: Targets<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Tensor<T>, targets: Targets<T>) -> Result<Self> {
        let n = features.shape().first().copied().ok_or_else(|| dim_err("dataset features need a sample dimension"))?;
        if targets.len() != n {
            return Err(dim_err(format!("dataset has {n} feature rows but {} targets", targets.len())));
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self { features: self.features.select_leading(indices)?, targets: self.targets.select(indices)? })
    }

    /// Reshapes every sample to `sample_shape`.
    pub fn reshape_samples(&self, sample_shape: &[usize]) -> Result<Self> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(sample_shape);
        Ok(Self { features: self.features.reshape(shape)?, targets: self.targets.clone() })
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset { features: self.features.cast(), targets: self.targets.cast() }
    }
}

/// Poisson batch sampler: every index joins each batch independently with
/// probability `q`.
#[derive(Debug)]
pub struct PoissonSampler {
    sample_rate: f64,
    num_samples: usize,
    rng: RngStream,
}

fn check_rate(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(param_err(format!("sample rate must lie in (0, 1], got {q}")))
    }
}

impl PoissonSampler {
    pub fn new(sample_rate: f64, num_samples: usize, rng: RngStream) -> Result<Self> {
        check_rate(sample_rate)?;
        Ok(Self { sample_rate, num_samples, rng })
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn set_sample_rate(&mut self, sample_rate: f64) -> Result<()> {
        check_rate(sample_rate)?;
        self.sample_rate = sample_rate;
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn expected_batch_size(&self) -> f64 {
        self.sample_rate * self.num_samples as f64
    }

    /// Batches per epoch, `round(1/q)`.
    pub fn steps_per_epoch(&self) -> usize {
        (1.0 / self.sample_rate).round().max(1.0) as usize
    }

    /// Ascending indices of the next batch; may be empty.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let q = self.sample_rate;
        (0..self.num_samples).filter(|_| self.rng.bernoulli(q)).collect()
    }
}

/// One epoch of a seeded shuffle cut into `ceil(n / batch_size)` batches.
pub fn uniform_batches(n: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(param_err("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStream::seeded(shuffle_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// How the target column of a CSV file is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Non-negative integer class labels.
    Classes,
    /// Real regression targets, one per sample.
    Values,
}

fn ingest_err(path: &Path, detail: impl Into<String>) -> DpError {
    DpError::Ingestion { path: path.to_path_buf(), detail: detail.into() }
}

/// Loads a CSV file with a header row. Features come from the named
/// columns in the given order; the target from `target_column`.
pub fn load_csv<T: Scalar>(path: &Path, feature_columns: &[String], target_column: &str, target_kind: TargetKind) -> Result<Dataset<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| ingest_err(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| ingest_err(path, format!("line 1: {e}")))?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| ingest_err(path, format!("line 1: header has no column `{name}`")))
    };
    let feature_idx = feature_columns.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;
    let target_idx = column(target_column)?;
    if feature_idx.is_empty() {
        return Err(param_err("at least one feature column is required"));
    }

    let (mut features, mut classes, mut values) = (Vec::new(), Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            ingest_err(path, format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<f64> {
            let raw = record.get(i).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| ingest_err(path, format!("line {line}: column `{}`: `{raw}` is not a number", &headers[i])))
        };
        for &i in &feature_idx {
            features.push(T::of(field(i)?));
        }
        let target = field(target_idx)?;
        match target_kind {
            TargetKind::Classes => {
                if target < 0.0 || target.fract() != 0.0 {
                    return Err(ingest_err(path, format!("line {line}: class label `{target}` is not a non-negative integer")));
                }
                classes.push(target as usize);
            }
            TargetKind::Values => values.push(T::of(target)),
        }
    }
    let n = features.len() / feature_idx.len();
    let targets = match target_kind {
        TargetKind::Classes => Targets::Classes(classes),
        TargetKind::Values => Targets::Values(Tensor::new(vec![n, 1], values)?),
    };
    Dataset::new(Tensor::new(vec![n, feature_idx.len()], features)?, targets)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| ingest_err(path, e.to_string()))?;
    let word = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|w| u32::from_be_bytes([w[0], w[1], w[2], w[3]]))
            .ok_or_else(|| ingest_err(path, format!("offset {offset}: header truncated")))
    };
    let found = word(0)?;
    if found != magic {
        return Err(ingest_err(path, format!("offset 0: magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim).map(|d| word(4 + 4 * d).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(ingest_err(
            path,
            format!("offset {start}: payload holds {} bytes, header {dims:?} requires {expected}", payload.len()),
        ));
    }
    Ok((dims, payload.to_vec()))
}

/// Loads an IDX image/label pair. Images become `[n, rows, cols]` with
/// pixels scaled to `[0, 1]`; labels become class targets.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let (dims, pixels) = read_idx(images_path, IDX_IMAGES)?;
    let (label_dims, labels) = read_idx(labels_path, IDX_LABELS)?;
    if dims[0] != label_dims[0] {
        return Err(ingest_err(labels_path, format!("{} labels for {} images", label_dims[0], dims[0])));
    }
    let features = Tensor::new(dims, pixels.iter().map(|&p| T::of(p as f64 / 255.0)).collect())?;
    Dataset::new(features, Targets::Classes(labels.into_iter().map(usize::from).collect()))
}

/// Isotropic Gaussian blobs: class `c` is centred at `separation * e_c`
/// (cycling over dimensions) with unit variance.
pub fn make_blobs<T: Scalar>(n: usize, dim: usize, classes: usize, separation: f64, rng: &mut RngStream) -> Result<Dataset<T>> {
    if dim == 0 || classes < 2 {
        return Err(param_err("blobs need dim >= 1 and at least two classes"));
    }
    let mut features = vec![0.0; n * dim];
    rng.fill_normal(&mut features, 1.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    for (row, &c) in features.chunks_mut(dim).zip(&labels) {
        let axis = c % dim;
        let sign = if (c / dim).is_multiple_of(2) { 1.0 } else { -1.0 };
        row[axis] += sign * separation;
    }
    Dataset::new(Tensor::from_f64(vec![n, dim], &features)?, Targets::Classes(labels))
}
