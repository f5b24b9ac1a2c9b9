//! The private optimizer: per-sample clipping, aggregation, Gaussian noise
//! and an SGD update, with gradient accumulation across physical batches.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::accountant::RdpAccountant;
use crate::data::PoissonSampler;
use crate::error::{dim_err, param_err, DpError, Result};
use crate::grad_sample::{compute_grad_samples, GradSampleOutput, GradSampleRecord, GradSamplerRegistry};
use crate::nn::{LossKind, ModelGraph, ParameterSet, Targets};
use crate::rng::{RngKind, RngStream};
use crate::tensor::{Scalar, Tensor};
use crate::validator::validate_model;

/// What `step` does when the logical batch holds no samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyBatchPolicy {
    /// Add noise to a zero sum, average and update as usual.
    #[default]
    NoiseOnly,
    /// Refuse with a lifecycle error.
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpOptimizerConfig {
    pub noise_multiplier: f64,
    pub max_grad_norm: f64,
    pub learning_rate: f64,
    /// Denominator of the averaged gradient, `q * N` under Poisson sampling.
    pub expected_batch_size: f64,
    pub secure_mode: bool,
    /// Seed of the noise stream. Required unless `secure_mode` is set, in
    /// which case it must be absent.
    pub noise_seed: Option<u64>,
    pub empty_batch: EmptyBatchPolicy,
}

impl DpOptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(param_err(format!("noise multiplier must be finite and >= 0, got {}", self.noise_multiplier)));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(param_err(format!("max grad norm must be > 0, got {}", self.max_grad_norm)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(param_err(format!("learning rate must be finite and > 0, got {}", self.learning_rate)));
        }
        if !(self.expected_batch_size > 0.0 && self.expected_batch_size.is_finite()) {
            return Err(param_err(format!("expected batch size must be finite and > 0, got {}", self.expected_batch_size)));
        }
        Ok(())
    }

    fn noise_stream(&self) -> Result<RngStream> {
        let kind = if self.secure_mode { RngKind::Secure } else { RngKind::Standard };
        RngStream::new(kind, self.noise_seed)
    }
}

/// Per-sample norms and clipping weights of one physical batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSummary {
    pub per_sample_norms: Vec<f64>,
    pub scale_factors: Vec<f64>,
    pub num_clipped: usize,
}

/// Clipping weight `C / max(norm, C)`.
pub fn clip_factor(norm: f64, max_grad_norm: f64) -> f64 {
    max_grad_norm / norm.max(max_grad_norm)
}

/// Clips every sample to global norm `max_grad_norm` (the norm is taken
/// over all parameters together) and sums over the batch in `f64`.
pub fn clip_and_sum<T: Scalar>(record: &GradSampleRecord<T>, max_grad_norm: f64) -> Result<(Vec<Tensor<f64>>, ClipSummary)> {
    if !(max_grad_norm > 0.0) {
        return Err(param_err(format!("max grad norm must be > 0, got {max_grad_norm}")));
    }
    let b = record.batch_size();
    let mut sq = vec![0.0f64; b];
    for e in record.entries() {
        if let Some(pos) = e.tensor.data().iter().position(|v| !v.as_f64().is_finite()) {
            return Err(DpError::Numeric {
                param: format!("layer {} {}", e.layer_index, e.name),
                detail: format!("non-finite per-sample gradient at sample {}", pos / (e.tensor.numel() / b).max(1)),
            });
        }
        let per = e.tensor.numel() / b.max(1);
        for (i, chunk) in e.tensor.data().chunks_exact(per.max(1)).enumerate().take(b) {
            sq[i] += chunk.iter().fold(0.0, |a, v| a + v.as_f64() * v.as_f64());
        }
    }
    let norms: Vec<f64> = sq.iter().map(|s| s.sqrt()).collect();
    let scales: Vec<f64> = norms.iter().map(|&n| clip_factor(n, max_grad_norm)).collect();
    let summed = record
        .entries()
        .iter()
        .map(|e| {
            let shape = e.tensor.shape()[1..].to_vec();
            let per: usize = shape.iter().product();
            let mut acc = vec![0.0f64; per];
            for (chunk, &s) in e.tensor.data().chunks_exact(per.max(1)).zip(&scales) {
                for (a, v) in acc.iter_mut().zip(chunk) {
                    *a += s * v.as_f64();
                }
            }
            Tensor::new(shape, acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let num_clipped = norms.iter().filter(|&&n| n > max_grad_norm).count();
    Ok((summed, ClipSummary { per_sample_norms: norms, scale_factors: scales, num_clipped }))
}

/// Adds i.i.d. `N(0, (σC)²)` noise to every coordinate, tensor by tensor in
/// order. `σ = 0` returns the input unchanged.
pub fn add_noise(summed: &[Tensor<f64>], noise_multiplier: f64, max_grad_norm: f64, rng: &mut RngStream) -> Result<Vec<Tensor<f64>>> {
    let std = noise_multiplier * max_grad_norm;
    summed.iter().map(|t| t.add(&Tensor::gaussian(t.shape().to_vec(), std, rng)?)).collect()
}

/// Where the gradient lifecycle currently stands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// No gradients at all.
    Cleared,
    /// Per-sample gradients of a physical batch are attached.
    GradSample,
    /// Clipped sums of one or more physical batches are accumulated.
    Accumulated,
    /// The final gradient is populated and parameters were updated.
    Stepped,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Cleared => "cleared",
            Stage::GradSample => "grad_sample",
            Stage::Accumulated => "accumulated",
            Stage::Stepped => "stepped",
        };
        f.write_str(s)
    }
}

type ParamKey = (usize, String);

/// The three gradient fields and the stage they are in.
#[derive(Debug, Clone)]
pub struct GradientState<T: Scalar = f32> {
    stage: Stage,
    keys: Vec<ParamKey>,
    grad_sample: Option<GradSampleRecord<T>>,
    summed_grad: Option<Vec<Tensor<f64>>>,
    accumulated_samples: usize,
    grad: Option<Vec<Tensor<T>>>,
    last_clip: Option<ClipSummary>,
}

impl<T: Scalar> Default for GradientState<T> {
    fn default() -> Self {
        Self {
            stage: Stage::Cleared,
            keys: Vec::new(),
            grad_sample: None,
            summed_grad: None,
            accumulated_samples: 0,
            grad: None,
            last_clip: None,
        }
    }
}

impl<T: Scalar> GradientState<T> {
    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn grad_sample(&self) -> Option<&GradSampleRecord<T>> {
        self.grad_sample.as_ref()
    }

    pub fn summed_grad(&self) -> Option<&[Tensor<f64>]> {
        self.summed_grad.as_deref()
    }

    pub fn grad(&self) -> Option<&[Tensor<T>]> {
        self.grad.as_deref()
    }

    /// Samples accumulated into `summed_grad` so far.
    pub fn accumulated_samples(&self) -> usize {
        self.accumulated_samples
    }

    pub fn last_clip(&self) -> Option<&ClipSummary> {
        self.last_clip.as_ref()
    }

    /// `(layer_index, name)` of each gradient tensor, in order.
    pub fn keys(&self) -> &[ParamKey] {
        &self.keys
    }
}

fn illegal(op: &str, stage: Stage) -> DpError {
    DpError::Lifecycle(format!("`{op}` is not allowed in stage `{stage}`"))
}

/// Private SGD over a model's parameters.
#[derive(Debug)]
pub struct DpOptimizer<T: Scalar = f32> {
    config: DpOptimizerConfig,
    state: GradientState<T>,
    noise_rng: RngStream,
    accountant: RdpAccountant,
    sample_rate: f64,
    unaccounted_steps: u64,
}

impl<T: Scalar> DpOptimizer<T> {
    /// `sample_rate` is the per-step inclusion probability handed to the
    /// accountant.
    pub fn new(config: DpOptimizerConfig, sample_rate: f64) -> Result<Self> {
        config.validate()?;
        if !(sample_rate > 0.0 && sample_rate <= 1.0) {
            return Err(param_err(format!("sample rate must lie in (0, 1], got {sample_rate}")));
        }
        let noise_rng = config.noise_stream()?;
        Ok(Self {
            config,
            state: GradientState::default(),
            noise_rng,
            accountant: RdpAccountant::new(),
            sample_rate,
            unaccounted_steps: 0,
        })
    }

    pub fn config(&self) -> &DpOptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &GradientState<T> {
        &self.state
    }

    pub fn accountant(&self) -> &RdpAccountant {
        &self.accountant
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn set_noise_multiplier(&mut self, sigma: f64) -> Result<()> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(param_err(format!("noise multiplier must be finite and >= 0, got {sigma}")));
        }
        self.config.noise_multiplier = sigma;
        Ok(())
    }

    pub fn set_sample_rate(&mut self, q: f64) -> Result<()> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(param_err(format!("sample rate must lie in (0, 1], got {q}")));
        }
        self.sample_rate = q;
        Ok(())
    }

    pub fn set_expected_batch_size(&mut self, expected: f64) -> Result<()> {
        if !(expected > 0.0 && expected.is_finite()) {
            return Err(param_err(format!("expected batch size must be finite and > 0, got {expected}")));
        }
        self.config.expected_batch_size = expected;
        Ok(())
    }

    /// Attaches the per-sample gradients of a physical batch.
    pub fn attach_grad_samples(&mut self, record: GradSampleRecord<T>) -> Result<()> {
        match self.state.stage {
            Stage::Cleared | Stage::Accumulated => {}
            s => return Err(illegal("attach_grad_samples", s)),
        }
        let keys: Vec<ParamKey> = record.entries().iter().map(|e| (e.layer_index, e.name.clone())).collect();
        if self.state.stage == Stage::Accumulated && keys != self.state.keys {
            return Err(dim_err("grad sample record does not match the accumulated parameters"));
        }
        self.state.keys = keys;
        self.state.grad_sample = Some(record);
        self.state.stage = Stage::GradSample;
        Ok(())
    }

    fn accumulate(&mut self) -> Result<()> {
        let record = self.state.grad_sample.as_ref().ok_or_else(|| illegal("accumulate", self.state.stage))?;
        let (summed, summary) = clip_and_sum(record, self.config.max_grad_norm)?;
        match &mut self.state.summed_grad {
            Some(acc) => {
                for (a, s) in acc.iter_mut().zip(&summed) {
                    a.add_assign(s)?;
                }
            }
            None => self.state.summed_grad = Some(summed),
        }
        self.state.accumulated_samples += record.batch_size();
        self.state.last_clip = Some(summary);
        self.state.stage = Stage::Accumulated;
        Ok(())
    }

    /// Clips and accumulates the attached physical batch without updating
    /// parameters.
    pub fn virtual_step(&mut self) -> Result<()> {
        if self.state.stage != Stage::GradSample {
            return Err(illegal("virtual_step", self.state.stage));
        }
        self.accumulate()
    }

    /// Closes the logical batch: noise, average by the expected batch size,
    /// and `w -= lr * grad`. Records one accountant step.
    pub fn step(&mut self, model: &mut ModelGraph<T>) -> Result<()> {
        match self.state.stage {
            Stage::GradSample => self.accumulate()?,
            Stage::Accumulated => {}
            s => return Err(illegal("step", s)),
        }
        if self.state.accumulated_samples == 0 && self.config.empty_batch == EmptyBatchPolicy::Reject {
            return Err(DpError::Lifecycle("step on an empty logical batch with the reject policy".into()));
        }
        let summed = self.state.summed_grad.as_ref().ok_or_else(|| illegal("step", self.state.stage))?;
        let noised = add_noise(summed, self.config.noise_multiplier, self.config.max_grad_norm, &mut self.noise_rng)?;
        let inv = 1.0 / self.config.expected_batch_size;
        let grads: Vec<Tensor<T>> = noised.iter().map(|t| t.map(|v| v * inv).cast()).collect();

        for ((layer_index, name), g) in self.state.keys.iter().zip(&grads) {
            let param = model
                .layers_mut()
                .get_mut(*layer_index)
                .and_then(|l| l.params.get_mut(name))
                .ok_or_else(|| param_err(format!("model has no parameter `{name}` at layer {layer_index}")))?;
            sgd_update(param, g, self.config.learning_rate)?;
        }
        self.state.grad = Some(grads);
        self.state.stage = Stage::Stepped;

        if self.config.noise_multiplier > 0.0 {
            self.accountant.step(self.config.noise_multiplier, self.sample_rate, 1)?;
        } else {
            self.unaccounted_steps += 1;
        }
        Ok(())
    }

    /// Drops all three gradient fields. Legal in every stage.
    pub fn zero_grad(&mut self) {
        self.state = GradientState::default();
    }

    /// Steps taken without noise; any such step voids the guarantee.
    pub fn unaccounted_steps(&self) -> u64 {
        self.unaccounted_steps
    }

    /// ε spent so far at `delta`; infinite once a noiseless step was taken.
    pub fn epsilon(&self, delta: f64) -> Result<f64> {
        if self.unaccounted_steps > 0 {
            return Ok(f64::INFINITY);
        }
        Ok(self.accountant.get_privacy_spent(delta)?.epsilon)
    }
}

/// `param -= lr * grad`.
pub fn sgd_update<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, learning_rate: f64) -> Result<()> {
    param.add_assign(&grad.scale(T::of(-learning_rate)))
}

/// Plain SGD on per-layer gradients as returned by the ordinary backward.
pub fn sgd_step<T: Scalar>(model: &mut ModelGraph<T>, grads: &[ParameterSet<T>], learning_rate: f64) -> Result<()> {
    if grads.len() != model.len() {
        return Err(dim_err(format!("{} gradient sets for {} layers", grads.len(), model.len())));
    }
    for (layer, g) in model.layers_mut().iter_mut().zip(grads) {
        for (name, param) in layer.params.iter_mut() {
            let grad = g.get(name).ok_or_else(|| param_err(format!("missing gradient for `{name}`")))?;
            sgd_update(param, grad, learning_rate)?;
        }
    }
    Ok(())
}

/// Noise multiplier as a function of the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSchedule {
    Constant,
    /// `σ₀ · γ^epoch`.
    Exponential { gamma: f64 },
    /// `σ₀ · factor^(epoch / period)` with integer division.
    Step { factor: f64, period: usize },
    /// `table[epoch]`, holding the last entry once the table runs out.
    Custom { table: Vec<f64> },
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            NoiseSchedule::Constant => true,
            NoiseSchedule::Exponential { gamma } => *gamma >= 0.0 && gamma.is_finite(),
            NoiseSchedule::Step { factor, period } => *factor >= 0.0 && factor.is_finite() && *period > 0,
            NoiseSchedule::Custom { table } => !table.is_empty() && table.iter().all(|s| *s >= 0.0 && s.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(param_err(format!("invalid noise schedule {self:?}")))
        }
    }

    pub fn sigma_at(&self, base_sigma: f64, epoch: usize) -> f64 {
        match self {
            NoiseSchedule::Constant => base_sigma,
            NoiseSchedule::Exponential { gamma } => base_sigma * gamma.powi(epoch as i32),
            NoiseSchedule::Step { factor, period } => base_sigma * factor.powi((epoch / period) as i32),
            NoiseSchedule::Custom { table } => table[epoch.min(table.len() - 1)],
        }
    }
}

/// A model paired with the rules that compute its per-sample gradients.
#[derive(Debug)]
pub struct GradSampleModule<T: Scalar = f32> {
    model: ModelGraph<T>,
    registry: GradSamplerRegistry<T>,
}

impl<T: Scalar> GradSampleModule<T> {
    pub fn model(&self) -> &ModelGraph<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ModelGraph<T> {
        &mut self.model
    }

    pub fn registry(&self) -> &GradSamplerRegistry<T> {
        &self.registry
    }

    pub fn into_model(self) -> ModelGraph<T> {
        self.model
    }

    /// Forward, backward and per-sample gradients for one physical batch.
    pub fn forward_backward(&self, input: &Tensor<T>, targets: &Targets<T>, loss: LossKind) -> Result<GradSampleOutput<T>> {
        compute_grad_samples(&self.model, &self.registry, input, targets, loss)
    }

    /// The record to attach for a batch with no samples.
    pub fn empty_record(&self) -> GradSampleRecord<T> {
        GradSampleRecord::empty_for(&self.model)
    }
}

/// Poisson loader settings for [`make_private`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoaderConfig {
    pub sample_rate: f64,
    pub num_samples: usize,
    /// Seed of the sampling stream; must be absent in secure mode.
    pub seed: Option<u64>,
}

/// Validates `model` and wraps it for private training. The optimizer
/// averages by the loader's expected batch size `q * N`; in secure mode
/// both noise and batch composition use the secure stream.
pub fn make_private<T: Scalar>(
    model: ModelGraph<T>,
    registry: GradSamplerRegistry<T>,
    mut optimizer: DpOptimizerConfig,
    loader: LoaderConfig,
) -> Result<(GradSampleModule<T>, DpOptimizer<T>, PoissonSampler)> {
    let violations = validate_model(&model, &registry);
    if !violations.is_empty() {
        return Err(DpError::Validation(violations));
    }
    optimizer.expected_batch_size = loader.sample_rate * loader.num_samples as f64;
    let kind = if optimizer.secure_mode { RngKind::Secure } else { RngKind::Standard };
    let sampler = PoissonSampler::new(loader.sample_rate, loader.num_samples, RngStream::new(kind, loader.seed)?)?;
    let opt = DpOptimizer::new(optimizer, loader.sample_rate)?;
    Ok((GradSampleModule { model, registry }, opt, sampler))
}
