//! Small randomized models, one family per supported parameterized layer
//! kind, with matching random batches. Used for oracle checks and
//! micro-benchmarks.

use rand::Rng;

use crate::error::{param_err, Result};
use crate::nn::{LayerDescriptor, LossKind, ModelGraph, Targets};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Layer kinds with a built-in per-sample rule.
pub const SUPPORTED_KINDS: [&str; 5] = ["linear", "embedding", "conv2d", "layer_norm", "group_norm"];

/// A model together with one batch to run it on.
#[derive(Debug, Clone)]
pub struct Case<T: Scalar = f32> {
    pub kind: String,
    pub model: ModelGraph<T>,
    pub input: Tensor<T>,
    pub targets: Targets<T>,
    pub loss: LossKind,
}

impl<T: Scalar> Case<T> {
    pub fn cast<U: Scalar>(&self) -> Result<Case<U>> {
        Ok(Case {
            kind: self.kind.clone(),
            model: self.model.cast()?,
            input: self.input.cast(),
            targets: self.targets.cast(),
            loss: self.loss,
        })
    }
}

fn uniform(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn randomize_norm_affine(model: &mut ModelGraph<f64>, rng: &mut RngStream) {
    for layer in model.layers_mut() {
        if matches!(layer.descriptor, LayerDescriptor::LayerNorm { .. } | LayerDescriptor::GroupNorm { .. }) {
            for (_, t) in layer.params.iter_mut() {
                *t = uniform(t.shape(), rng).map(|v| v + 0.5);
            }
        }
    }
}

fn head(features: usize, classes: usize) -> LayerDescriptor {
    LayerDescriptor::Linear { in_features: features, out_features: classes, bias: true }
}

/// Random architecture exercising `kind`, with a batch of `batch` samples.
/// Parameters and inputs are drawn in double precision, then cast.
pub fn random_case<T: Scalar>(kind: &str, batch: usize, rng: &mut RngStream) -> Result<Case<T>> {
    let classes = rng.gen_range(2..=4);
    let (descs, input): (Vec<LayerDescriptor>, Tensor<f64>) = match kind {
        "linear" => {
            let d = rng.gen_range(1..=6);
            let h = rng.gen_range(1..=6);
            if rng.gen_bool(0.3) {
                // Sequence input: the linear rule sums over the middle dim.
                let t = rng.gen_range(2..=3);
                let descs = vec![
                    LayerDescriptor::Linear { in_features: d, out_features: h, bias: true },
                    LayerDescriptor::Relu,
                    LayerDescriptor::Flatten,
                    head(t * h, classes),
                ];
                (descs, uniform(&[batch, t, d], rng))
            } else {
                let descs = vec![
                    LayerDescriptor::Linear { in_features: d, out_features: h, bias: rng.gen_bool(0.8) },
                    LayerDescriptor::Relu,
                    head(h, classes),
                ];
                (descs, uniform(&[batch, d], rng))
            }
        }
        "embedding" => {
            let vocab = rng.gen_range(2..=8);
            let dim = rng.gen_range(1..=4);
            let tokens = rng.gen_range(1..=4);
            let descs = vec![
                LayerDescriptor::Embedding { num_embeddings: vocab, embedding_dim: dim },
                LayerDescriptor::Flatten,
                head(tokens * dim, classes),
            ];
            let ids = (0..batch * tokens).map(|_| rng.gen_range(0..vocab) as f64).collect();
            (descs, Tensor::from_parts(vec![batch, tokens], ids))
        }
        "conv2d" | "group_norm" => {
            let c = rng.gen_range(1..=3);
            let groups = rng.gen_range(1..=2);
            let o = groups * rng.gen_range(1..=2);
            let h = rng.gen_range(3..=5);
            let w = rng.gen_range(3..=5);
            let kernel = [rng.gen_range(1..=3), rng.gen_range(1..=3)];
            let stride = [rng.gen_range(1..=2), rng.gen_range(1..=2)];
            let padding = [rng.gen_range(0..=1), rng.gen_range(0..=1)];
            let oh = (h + 2 * padding[0] - kernel[0]) / stride[0] + 1;
            let ow = (w + 2 * padding[1] - kernel[1]) / stride[1] + 1;
            let mut descs = vec![LayerDescriptor::Conv2d {
                in_channels: c,
                out_channels: o,
                kernel_size: kernel,
                stride,
                padding,
                bias: rng.gen_bool(0.8),
            }];
            if kind == "group_norm" {
                descs.push(LayerDescriptor::GroupNorm { num_groups: groups, num_channels: o, eps: 1e-5 });
            } else {
                descs.push(LayerDescriptor::Relu);
            }
            descs.push(LayerDescriptor::Flatten);
            descs.push(head(o * oh * ow, classes));
            (descs, uniform(&[batch, c, h, w], rng))
        }
        "layer_norm" => {
            let d = rng.gen_range(1..=5);
            let h = rng.gen_range(2..=6);
            let descs = vec![
                LayerDescriptor::Linear { in_features: d, out_features: h, bias: true },
                LayerDescriptor::LayerNorm { normalized_shape: vec![h], eps: 1e-5 },
                head(h, classes),
            ];
            (descs, uniform(&[batch, d], rng))
        }
        other => return Err(param_err(format!("no random case family for layer kind `{other}`"))),
    };
    let mut model = ModelGraph::<f64>::from_descriptors(&descs, rng)?;
    randomize_norm_affine(&mut model, rng);
    let (loss, targets) = if rng.gen_bool(0.5) {
        (LossKind::Mse, Targets::Values(uniform(&[batch, classes], rng)))
    } else {
        (LossKind::SoftmaxCrossEntropy, Targets::Classes((0..batch).map(|_| rng.gen_range(0..classes)).collect()))
    };
    Case { kind: kind.to_string(), model, input, targets, loss }.cast()
}

/// Single-layer probe used by the micro-benchmark: one layer of `kind` with
/// fixed, moderately sized hyperparameters, fed a random batch.
pub fn single_layer_case<T: Scalar>(kind: &str, batch: usize, rng: &mut RngStream) -> Result<Case<T>> {
    let (desc, input) = match kind {
        "linear" => (LayerDescriptor::Linear { in_features: 64, out_features: 32, bias: true }, uniform(&[batch, 64], rng)),
        "embedding" => {
            let ids = (0..batch * 8).map(|_| rng.gen_range(0..100) as f64).collect();
            (LayerDescriptor::Embedding { num_embeddings: 100, embedding_dim: 16 }, Tensor::from_parts(vec![batch, 8], ids))
        }
        "conv2d" => (
            LayerDescriptor::Conv2d { in_channels: 3, out_channels: 8, kernel_size: [3, 3], stride: [1, 1], padding: [1, 1], bias: true },
            uniform(&[batch, 3, 8, 8], rng),
        ),
        "layer_norm" => (LayerDescriptor::LayerNorm { normalized_shape: vec![64], eps: 1e-5 }, uniform(&[batch, 64], rng)),
        "group_norm" => (LayerDescriptor::GroupNorm { num_groups: 4, num_channels: 16, eps: 1e-5 }, uniform(&[batch, 16, 4, 4], rng)),
        other => return Err(param_err(format!("no single-layer probe for layer kind `{other}`"))),
    };
    let model = ModelGraph::<f64>::from_descriptors(&[desc], rng)?;
    let (output, _) = crate::nn::forward(&model, &input)?;
    Case { kind: kind.to_string(), model, input, targets: Targets::Values(output.map(|_| 0.0)), loss: LossKind::Sum }.cast()
}
