//! Runtime of one forward and backward pass per mode, with exact counts of
//! the gradient storage each mode keeps alive.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use clap::ValueEnum;
use serde::Serialize;

use dpgrad::grad_sample::{compute_grad_samples, microbatch_oracle, GradSamplerRegistry};
use dpgrad::nn::mean_batch_gradient;
use dpgrad::zoo::{single_layer_case, Case};
use dpgrad::RngStream;

use crate::error::{config_err, Result};
use crate::memory::predict_memory;
use crate::report::{fmt_f64, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Ordinary batch gradient, no per-sample storage.
    Plain,
    /// One pass plus per-sample rules.
    Vectorized,
    /// One pass per sample.
    Microbatch,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Plain => "plain",
            Mode::Vectorized => "vectorized",
            Mode::Microbatch => "microbatch",
        })
    }
}

pub const MODES: [Mode; 3] = [Mode::Plain, Mode::Vectorized, Mode::Microbatch];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub layers: Vec<String>,
    pub batch_sizes: Vec<usize>,
    /// Timed passes per (layer, batch size, mode).
    pub repeats: usize,
    /// Distinct input batches cycled through by the timed passes.
    pub input_batches: usize,
    /// Untimed passes run first.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            layers: dpgrad::zoo::SUPPORTED_KINDS.iter().map(|s| s.to_string()).collect(),
            batch_sizes: vec![16, 32, 64, 128],
            repeats: 200,
            input_batches: 10,
            warmup: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub layer: String,
    pub batch_size: usize,
    pub mode: Mode,
    pub mean_step_seconds: f64,
    pub num_params: usize,
    /// Gradient elements held after the pass: `L` for plain, `b * L` otherwise.
    pub grad_elements: usize,
    pub predicted_ratio: f64,
    pub measured_ratio: f64,
}

/// Per-sample elements of input, target and output.
fn data_size(case: &Case<f32>) -> Result<usize> {
    let (out, _) = dpgrad::nn::forward(&case.model, &case.input)?;
    let b = case.input.shape()[0];
    Ok((case.input.numel() + out.numel()) / b + case.targets.per_sample_elements())
}

/// Runs one pass in `mode` and returns the gradient elements it produced.
fn run_pass(case: &Case<f32>, registry: &GradSamplerRegistry<f32>, mode: Mode) -> Result<usize> {
    Ok(match mode {
        Mode::Plain => {
            let (grads, _) = mean_batch_gradient(&case.model, &case.input, &case.targets, case.loss)?;
            black_box(&grads).iter().map(|g| g.numel()).sum()
        }
        Mode::Vectorized => {
            let out = compute_grad_samples(&case.model, registry, &case.input, &case.targets, case.loss)?;
            black_box(&out).record.numel()
        }
        Mode::Microbatch => {
            let out = microbatch_oracle(&case.model, &case.input, &case.targets, case.loss)?;
            black_box(&out).record.numel()
        }
    })
}

/// Times every mode for one layer and batch size.
pub fn bench_layer(kind: &str, batch_size: usize, cfg: &BenchConfig, registry: &GradSamplerRegistry<f32>) -> Result<Vec<BenchRow>> {
    let mut rng = RngStream::seeded(cfg.seed);
    let cases = (0..cfg.input_batches.max(1))
        .map(|_| single_layer_case::<f32>(kind, batch_size, &mut rng))
        .collect::<dpgrad::Result<Vec<_>>>()?;
    let num_params = cases[0].model.num_params();
    let c_data = data_size(&cases[0])?;
    let estimate = predict_memory(batch_size, num_params, c_data)?;
    let (bc, l) = ((batch_size * c_data) as f64, num_params as f64);

    let mut rows = Vec::with_capacity(MODES.len());
    for mode in MODES {
        for i in 0..cfg.warmup {
            run_pass(&cases[i % cases.len()], registry, mode)?;
        }
        let mut grad_elements = 0;
        let start = Instant::now();
        for i in 0..cfg.repeats {
            grad_elements = run_pass(&cases[i % cases.len()], registry, mode)?;
        }
        let mean = start.elapsed().as_secs_f64() / cfg.repeats as f64;
        let measured = (bc + l + grad_elements as f64) / (bc + 2.0 * l);
        rows.push(BenchRow {
            layer: kind.to_string(),
            batch_size,
            mode,
            mean_step_seconds: mean,
            num_params,
            grad_elements,
            predicted_ratio: if mode == Mode::Plain { 1.0 } else { estimate.ratio },
            measured_ratio: measured,
        });
    }
    Ok(rows)
}

pub fn microbench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 || cfg.layers.is_empty() || cfg.batch_sizes.is_empty() {
        return Err(config_err("microbench needs at least one layer, one batch size and one repeat"));
    }
    if cfg.batch_sizes.contains(&0) {
        return Err(config_err("batch sizes must be positive"));
    }
    let registry = GradSamplerRegistry::with_builtin_rules();
    let mut rows = Vec::new();
    for layer in &cfg.layers {
        for &b in &cfg.batch_sizes {
            rows.extend(bench_layer(layer, b, cfg, &registry)?);
        }
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> Result<Table> {
    let mut t = Table::new([
        "layer",
        "batch_size",
        "mode",
        "mean_step_seconds",
        "num_params",
        "grad_elements",
        "predicted_ratio",
        "measured_ratio",
    ]);
    for r in rows {
        t.push(vec![
            r.layer.clone(),
            r.batch_size.to_string(),
            r.mode.to_string(),
            format!("{:.6e}", r.mean_step_seconds),
            r.num_params.to_string(),
            r.grad_elements.to_string(),
            fmt_f64(r.predicted_ratio),
            fmt_f64(r.measured_ratio),
        ])?;
    }
    Ok(t)
}
