//! End-to-end training: validate, wrap, then epochs of Poisson batches
//! split into physical batches, reporting loss, accuracy and ε per epoch.

use dpgrad::accountant::{default_orders, get_noise_multiplier, SigmaSearch};
use dpgrad::data::{uniform_batches, Dataset};
use dpgrad::grad_sample::GradSamplerRegistry;
use dpgrad::nn::{forward, loss_forward_backward, mean_batch_gradient, LossKind, ModelGraph, Targets};
use dpgrad::optimizer::{make_private, sgd_step, DpOptimizerConfig, EmptyBatchPolicy, LoaderConfig, NoiseSchedule};
use dpgrad::{DpError, RngStream, Tensor};

use crate::config::{RunConfig, TrainMode};
use crate::error::{config_err, Result};
use crate::report::{fmt_f64, Table};

/// Samples per evaluation forward pass.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub sigma: f64,
    pub steps: usize,
    /// Samples consumed during the epoch.
    pub samples: usize,
    pub loss: f64,
    /// NaN for regression targets.
    pub accuracy: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub sample_rate: f64,
    /// Base noise multiplier, calibrated when a target ε was given.
    pub noise_multiplier: f64,
    pub delta: f64,
    pub final_epsilon: f64,
}

impl TrainReport {
    pub fn table(&self) -> Result<Table> {
        let mut t = Table::new(["epoch", "sigma", "steps", "samples", "loss", "accuracy", "epsilon"]);
        for r in &self.rows {
            t.push(vec![
                r.epoch.to_string(),
                fmt_f64(r.sigma),
                r.steps.to_string(),
                r.samples.to_string(),
                fmt_f64(r.loss),
                fmt_f64(r.accuracy),
                fmt_f64(r.epsilon),
            ])?;
        }
        Ok(t)
    }

    pub fn summary(&self) -> String {
        let last = self.rows.last();
        format!(
            "epochs={} final_loss={} final_accuracy={} sigma={} q={} epsilon={} delta={}",
            last.map_or(0, |r| r.epoch),
            last.map_or("nan".into(), |r| fmt_f64(r.loss)),
            last.map_or("nan".into(), |r| fmt_f64(r.accuracy)),
            fmt_f64(self.noise_multiplier),
            fmt_f64(self.sample_rate),
            fmt_f64(self.final_epsilon),
            self.delta
        )
    }
}

/// Mean loss and accuracy over the whole dataset.
pub fn evaluate(model: &ModelGraph<f32>, ds: &Dataset<f32>, loss: LossKind) -> Result<(f64, f64)> {
    let n = ds.len();
    let (mut total, mut correct) = (0.0f64, 0usize);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let batch = ds.select(&idx)?;
        let (logits, _) = forward(model, &batch.features)?;
        let (losses, _) = loss_forward_backward(loss, &logits, &batch.targets)?;
        total += losses.data().iter().map(|&v| v as f64).sum::<f64>();
        if let Targets::Classes(labels) = &batch.targets {
            correct += count_correct(&logits, labels);
        }
    }
    let accuracy = match ds.targets {
        Targets::Classes(_) => correct as f64 / n as f64,
        Targets::Values(_) => f64::NAN,
    };
    Ok((total / n as f64, accuracy))
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row.iter().enumerate().fold(0, |bi, (i, &v)| if v > row[bi] { i } else { bi });
            best == label
        })
        .count()
}

/// Seeds used when the config leaves them out: `fallback`, then 0.
fn seed(value: Option<u64>, fallback: Option<u64>) -> u64 {
    value.or(fallback).unwrap_or(0)
}

pub fn run_train(cfg: &RunConfig, fallback_seed: Option<u64>) -> Result<TrainReport> {
    cfg.check()?;
    let data_seed = seed(cfg.seed_data, fallback_seed);
    let ds = cfg.load_dataset(data_seed)?;
    if ds.is_empty() {
        return Err(config_err("dataset is empty"));
    }
    let n = ds.len();
    let q = cfg.sample_rate_for(n)?;
    let descriptors = cfg.descriptors()?;
    let loss = cfg.loss.unwrap_or(match ds.targets {
        Targets::Classes(_) => LossKind::SoftmaxCrossEntropy,
        Targets::Values(_) => LossKind::Mse,
    });
    let registry = GradSamplerRegistry::with_builtin_rules();
    let violations = dpgrad::validator::validate(&descriptors, &registry);
    if !violations.is_empty() {
        return Err(DpError::Validation(violations).into());
    }
    let model = ModelGraph::<f32>::from_descriptors(&descriptors, &mut RngStream::seeded(data_seed.wrapping_add(1)))?;
    let steps_per_epoch = (1.0 / q).round().max(1.0) as usize;
    let (loss0, acc0) = evaluate(&model, &ds, loss)?;
    let first = EpochRow { epoch: 0, sigma: 0.0, steps: 0, samples: 0, loss: loss0, accuracy: acc0, epsilon: 0.0 };

    match cfg.mode {
        TrainMode::Plain => train_plain(cfg, model, &ds, q, loss, data_seed, first),
        TrainMode::Dp => {
            let sigma = match (cfg.noise_multiplier, cfg.target_epsilon) {
                (Some(s), _) => s,
                (None, Some(target)) => get_noise_multiplier(
                    target,
                    cfg.delta,
                    q,
                    (cfg.epochs * steps_per_epoch) as u64,
                    &default_orders(),
                    SigmaSearch::default(),
                )?,
                (None, None) => return Err(config_err("no noise multiplier given")),
            };
            train_dp(cfg, model, registry, &ds, q, sigma, loss, data_seed, first)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_dp(
    cfg: &RunConfig,
    model: ModelGraph<f32>,
    registry: GradSamplerRegistry<f32>,
    ds: &Dataset<f32>,
    q: f64,
    sigma: f64,
    loss: LossKind,
    data_seed: u64,
    first: EpochRow,
) -> Result<TrainReport> {
    let schedule = cfg.noise_schedule.clone().unwrap_or(NoiseSchedule::Constant);
    let opt_cfg = DpOptimizerConfig {
        noise_multiplier: sigma,
        max_grad_norm: cfg.max_grad_norm,
        learning_rate: cfg.learning_rate,
        expected_batch_size: q * ds.len() as f64,
        secure_mode: cfg.secure_mode,
        noise_seed: if cfg.secure_mode { None } else { Some(seed(cfg.seed_noise, Some(data_seed))) },
        empty_batch: EmptyBatchPolicy::NoiseOnly,
    };
    let loader = LoaderConfig {
        sample_rate: q,
        num_samples: ds.len(),
        seed: if cfg.secure_mode { None } else { Some(data_seed.wrapping_add(2)) },
    };
    let (mut gsm, mut opt, mut sampler) = make_private(model, registry, opt_cfg, loader)?;
    let physical = cfg.physical_batch.unwrap_or(usize::MAX);
    let steps_per_epoch = sampler.steps_per_epoch();

    let mut rows = vec![first];
    for epoch in 1..=cfg.epochs {
        let sigma_e = schedule.sigma_at(sigma, epoch - 1);
        opt.set_noise_multiplier(sigma_e)?;
        let mut samples = 0;
        for _ in 0..steps_per_epoch {
            let idx = sampler.next_batch();
            samples += idx.len();
            if idx.is_empty() {
                opt.attach_grad_samples(gsm.empty_record())?;
            }
            let chunks: Vec<&[usize]> = idx.chunks(physical).collect();
            for (i, chunk) in chunks.iter().enumerate() {
                let batch = ds.select(chunk)?;
                let out = gsm.forward_backward(&batch.features, &batch.targets, loss)?;
                opt.attach_grad_samples(out.record)?;
                if i + 1 < chunks.len() {
                    opt.virtual_step()?;
                }
            }
            opt.step(gsm.model_mut())?;
            opt.zero_grad();
        }
        let (l, acc) = evaluate(gsm.model(), ds, loss)?;
        rows.push(EpochRow {
            epoch,
            sigma: sigma_e,
            steps: steps_per_epoch,
            samples,
            loss: l,
            accuracy: acc,
            epsilon: opt.epsilon(cfg.delta)?,
        });
    }
    let final_epsilon = rows.last().map_or(0.0, |r| r.epsilon);
    Ok(TrainReport { rows, sample_rate: q, noise_multiplier: sigma, delta: cfg.delta, final_epsilon })
}

fn train_plain(
    cfg: &RunConfig,
    mut model: ModelGraph<f32>,
    ds: &Dataset<f32>,
    q: f64,
    loss: LossKind,
    data_seed: u64,
    first: EpochRow,
) -> Result<TrainReport> {
    let batch_size = ((q * ds.len() as f64).round() as usize).max(1);
    let mut rows = vec![first];
    for epoch in 1..=cfg.epochs {
        let batches = uniform_batches(ds.len(), batch_size, data_seed.wrapping_add(2).wrapping_add(epoch as u64))?;
        let mut samples = 0;
        for idx in &batches {
            let batch = ds.select(idx)?;
            let (grads, _) = mean_batch_gradient(&model, &batch.features, &batch.targets, loss)?;
            sgd_step(&mut model, &grads, cfg.learning_rate)?;
            samples += idx.len();
        }
        let (l, acc) = evaluate(&model, ds, loss)?;
        rows.push(EpochRow {
            epoch,
            sigma: 0.0,
            steps: batches.len(),
            samples,
            loss: l,
            accuracy: acc,
            epsilon: f64::INFINITY,
        });
    }
    Ok(TrainReport { rows, sample_rate: q, noise_multiplier: 0.0, delta: cfg.delta, final_epsilon: f64::INFINITY })
}
