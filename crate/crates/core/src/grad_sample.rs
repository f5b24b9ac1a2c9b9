//! Vectorized per-sample gradients.
//!
//! One forward pass caches every layer's input activations; one backward
//! pass captures every layer's highway gradient (the loss gradient with
//! respect to the layer output). A per-kind rule then combines the two into
//! per-sample parameter gradients. For a linear layer this is the contraction
//! `n...i,n...j->nij` of highway gradients and activations; convolutions are
//! unfolded with im2col and reuse the linear rule.
//!
//! Per-sample losses use sum-reduction semantics: entry `i` of the record is
//! the gradient of sample `i`'s own loss, so the batch mean of the record is
//! the gradient of the mean-reduced batch loss.
//!
//! [`microbatch_oracle`] computes the same record the slow way, one full
//! forward and backward per sample, through the plain parameter backward of
//! each layer. It shares no per-sample code with the vectorized path.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{dim_err, DpError, Result};
use crate::nn::{self, im2col, CacheExtra, Layer, LayerCache, LayerDescriptor, LossKind, ModelGraph, ParameterSet, Targets};
use crate::tensor::{Scalar, Tensor};

/// Per-sample gradient of one parameter: shape `[b, ...param_shape]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSampleEntry<T: Scalar = f32> {
    pub layer_index: usize,
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Per-sample gradients for every trainable parameter of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSampleRecord<T: Scalar = f32> {
    batch_size: usize,
    entries: Vec<GradSampleEntry<T>>,
}

impl<T: Scalar> GradSampleRecord<T> {
    pub fn new(batch_size: usize, entries: Vec<GradSampleEntry<T>>) -> Result<Self> {
        for e in &entries {
            if e.tensor.shape().first() != Some(&batch_size) {
                return Err(dim_err(format!(
                    "grad sample for layer {} `{}` has shape {:?}, expected leading extent {batch_size}",
                    e.layer_index,
                    e.name,
                    e.tensor.shape()
                )));
            }
        }
        Ok(Self { batch_size, entries })
    }

    /// Record for an empty batch: every entry has leading extent 0.
    pub fn empty_for(model: &ModelGraph<T>) -> Self {
        let entries = model
            .layers()
            .iter()
            .enumerate()
            .flat_map(|(layer_index, layer)| {
                layer.params.iter().map(move |(name, t)| {
                    let mut shape = vec![0];
                    shape.extend_from_slice(t.shape());
                    GradSampleEntry { layer_index, name: name.to_string(), tensor: Tensor::zeros(shape) }
                })
            })
            .collect();
        Self { batch_size: 0, entries }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn entries(&self) -> &[GradSampleEntry<T>] {
        &self.entries
    }

    pub fn get(&self, layer_index: usize, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.layer_index == layer_index && e.name == name).map(|e| &e.tensor)
    }

    /// Total stored elements: `b * L` for a model with `L` parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Mean over the batch dimension, one tensor per entry.
    pub fn batch_mean(&self) -> Result<Vec<Tensor<T>>> {
        let scale = T::of(1.0 / self.batch_size.max(1) as f64);
        self.entries.iter().map(|e| Ok(e.tensor.sum_leading()?.scale(scale))).collect()
    }

    pub fn cast<U: Scalar>(&self) -> GradSampleRecord<U> {
        GradSampleRecord {
            batch_size: self.batch_size,
            entries: self
                .entries
                .iter()
                .map(|e| GradSampleEntry { layer_index: e.layer_index, name: e.name.clone(), tensor: e.tensor.cast() })
                .collect(),
        }
    }

    /// Largest per-entry error `max|a - b| / max|b|` against a reference
    /// record with the same layout.
    pub fn max_rel_err(&self, reference: &GradSampleRecord<T>) -> Result<f64> {
        if self.entries.len() != reference.entries.len() || self.batch_size != reference.batch_size {
            return Err(dim_err("grad sample records have different layouts"));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.entries.iter().zip(&reference.entries) {
            if (a.layer_index, &a.name) != (b.layer_index, &b.name) {
                return Err(dim_err(format!(
                    "record entry mismatch: layer {} `{}` vs layer {} `{}`",
                    a.layer_index, a.name, b.layer_index, b.name
                )));
            }
            let diff = a.tensor.max_abs_diff(&b.tensor)?;
            let scale = b.tensor.max_abs();
            let err = if scale > 0.0 { diff / scale } else { diff };
            worst = worst.max(err);
        }
        Ok(worst)
    }
}

/// Computes per-sample gradients of one layer's parameters from its cached
/// forward intermediates and its highway gradient. Each returned tensor has
/// shape `[b, ...param_shape]`.
pub trait GradSampleRule<T: Scalar>: Send + Sync {
    fn grad_samples(&self, layer: &Layer<T>, cache: &LayerCache<T>, highway: &Tensor<T>) -> Result<ParameterSet<T>>;
}

impl<T, F> GradSampleRule<T> for F
where
    T: Scalar,
    F: Fn(&Layer<T>, &LayerCache<T>, &Tensor<T>) -> Result<ParameterSet<T>> + Send + Sync,
{
    fn grad_samples(&self, layer: &Layer<T>, cache: &LayerCache<T>, highway: &Tensor<T>) -> Result<ParameterSet<T>> {
        self(layer, cache, highway)
    }
}

/// Maps layer kinds to their per-sample rules.
#[derive(Clone)]
pub struct GradSamplerRegistry<T: Scalar = f32> {
    rules: BTreeMap<String, Arc<dyn GradSampleRule<T>>>,
}

impl<T: Scalar> fmt::Debug for GradSamplerRegistry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GradSamplerRegistry").field("kinds", &self.rules.keys().collect::<Vec<_>>()).finish()
    }
}

impl<T: Scalar> Default for GradSamplerRegistry<T> {
    fn default() -> Self {
        Self::with_builtin_rules()
    }
}

impl<T: Scalar> GradSamplerRegistry<T> {
    pub fn empty() -> Self {
        Self { rules: BTreeMap::new() }
    }

    /// Rules for linear, embedding, conv2d, layer_norm and group_norm.
    pub fn with_builtin_rules() -> Self {
        let mut reg = Self::empty();
        let builtins: [(&str, Arc<dyn GradSampleRule<T>>); 5] = [
            ("linear", Arc::new(linear_rule::<T>)),
            ("embedding", Arc::new(embedding_rule::<T>)),
            ("conv2d", Arc::new(conv2d_rule::<T>)),
            ("layer_norm", Arc::new(norm_rule::<T>)),
            ("group_norm", Arc::new(norm_rule::<T>)),
        ];
        for (kind, rule) in builtins {
            reg.rules.insert(kind.to_string(), rule);
        }
        reg
    }

    /// Registers `rule` for `kind`. Replacing an existing rule requires
    /// `allow_override`.
    pub fn register(&mut self, kind: impl Into<String>, rule: Arc<dyn GradSampleRule<T>>, allow_override: bool) -> Result<()> {
        let kind = kind.into();
        if self.rules.contains_key(&kind) && !allow_override {
            return Err(DpError::Registry(format!("a grad-sample rule for `{kind}` is already registered")));
        }
        self.rules.insert(kind, rule);
        Ok(())
    }

    pub fn get(&self, kind: &str) -> Option<&Arc<dyn GradSampleRule<T>>> {
        self.rules.get(kind)
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.rules.contains_key(kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().map(String::as_str)
    }
}

/// Forward/backward pass counts of one computation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounts {
    pub forward: usize,
    pub backward: usize,
}

#[derive(Clone, Debug)]
pub struct GradSampleOutput<T: Scalar = f32> {
    pub record: GradSampleRecord<T>,
    /// Per-sample losses `[b]`.
    pub losses: Tensor<T>,
    pub logits: Tensor<T>,
    pub passes: PassCounts,
}

fn batch_of<T: Scalar>(input: &Tensor<T>) -> Result<usize> {
    input.shape().first().copied().ok_or_else(|| dim_err("batch input needs a leading batch dimension"))
}

/// Vectorized per-sample gradients: one forward pass, one backward pass,
/// then the registered rule of every parameterized layer.
pub fn compute_grad_samples<T: Scalar>(
    model: &ModelGraph<T>,
    registry: &GradSamplerRegistry<T>,
    input: &Tensor<T>,
    targets: &Targets<T>,
    loss: LossKind,
) -> Result<GradSampleOutput<T>> {
    let b = batch_of(input)?;
    if b == 0 {
        return Err(dim_err("compute_grad_samples needs a non-empty batch"));
    }
    let mut passes = PassCounts::default();
    let (logits, cache) = nn::forward(model, input)?;
    passes.forward += 1;
    let (losses, grad_logits) = nn::loss_forward_backward(loss, &logits, targets)?;
    let highways = nn::backward(model, &cache, &grad_logits)?.highways;
    passes.backward += 1;

    let mut entries = Vec::new();
    for (index, layer) in model.layers().iter().enumerate() {
        if layer.params.is_empty() {
            continue;
        }
        let rule = registry.get(layer.kind()).ok_or_else(|| {
            DpError::Registry(format!("no grad-sample rule registered for kind `{}` (layer {index})", layer.kind()))
        })?;
        let samples = rule.grad_samples(layer, &cache.layers[index], &highways[index])?;
        for (name, param) in layer.params.iter() {
            let tensor = samples.get(name).cloned().ok_or_else(|| {
                DpError::Registry(format!("rule for `{}` produced no grad sample for `{name}`", layer.kind()))
            })?;
            let mut want = vec![b];
            want.extend_from_slice(param.shape());
            if tensor.shape() != want.as_slice() {
                return Err(dim_err(format!(
                    "layer {index} ({}) grad sample `{name}` has shape {:?}, expected {:?}",
                    layer.kind(),
                    tensor.shape(),
                    want
                )));
            }
            entries.push(GradSampleEntry { layer_index: index, name: name.to_string(), tensor });
        }
    }
    Ok(GradSampleOutput { record: GradSampleRecord::new(b, entries)?, losses, logits, passes })
}

/// The naive per-sample loop: for each sample, a full forward and backward
/// pass with batch size one, gradients reset in between.
pub fn microbatch_oracle<T: Scalar>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    targets: &Targets<T>,
    loss: LossKind,
) -> Result<GradSampleOutput<T>> {
    let b = batch_of(input)?;
    if b == 0 {
        return Err(dim_err("microbatch_oracle needs a non-empty batch"));
    }
    let mut passes = PassCounts::default();
    let mut per_sample: Vec<Vec<ParameterSet<T>>> = Vec::with_capacity(b);
    let mut losses = Vec::with_capacity(b);
    let mut logits = Vec::with_capacity(b);
    for i in 0..b {
        let x = input.select_leading(&[i])?;
        let t = targets.select(&[i])?;
        let (out, cache) = nn::forward(model, &x)?;
        passes.forward += 1;
        let (l, g) = nn::loss_forward_backward(loss, &out, &t)?;
        let back = nn::backward(model, &cache, &g)?;
        passes.backward += 1;
        per_sample.push(nn::param_gradients(model, &cache, &back.highways)?);
        losses.push(l.data()[0]);
        logits.push(out.slice_leading(0)?);
    }
    let mut entries = Vec::new();
    for (index, layer) in model.layers().iter().enumerate() {
        for (name, _) in layer.params.iter() {
            let slices = per_sample
                .iter()
                .map(|grads| {
                    grads[index].get(name).cloned().ok_or_else(|| {
                        DpError::Registry(format!("layer {index} backward produced no gradient for `{name}`"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push(GradSampleEntry { layer_index: index, name: name.to_string(), tensor: Tensor::stack(&slices)? });
        }
    }
    Ok(GradSampleOutput {
        record: GradSampleRecord::new(b, entries)?,
        losses: Tensor::new(vec![b], losses)?,
        logits: Tensor::stack(&logits)?,
        passes,
    })
}

/// Result of checking the vectorized path against the micro-batch oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleCheck {
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Runs both paths on one batch and reports their disagreement. Useful for
/// vetting a rule registered for a custom layer.
pub fn check_against_oracle<T: Scalar>(
    model: &ModelGraph<T>,
    registry: &GradSamplerRegistry<T>,
    input: &Tensor<T>,
    targets: &Targets<T>,
    loss: LossKind,
    tolerance: f64,
) -> Result<OracleCheck> {
    let fast = compute_grad_samples(model, registry, input, targets, loss)?;
    let slow = microbatch_oracle(model, input, targets, loss)?;
    Ok(OracleCheck { max_rel_err: fast.record.max_rel_err(&slow.record)?, tolerance })
}

/// `[b, M, d] -> [b, d]`: sums over the middle positions of each sample.
fn sum_middle<T: Scalar>(t: &Tensor<T>, b: usize) -> Tensor<T> {
    let d = *t.shape().last().unwrap_or(&1);
    let per = t.numel() / b.max(1);
    let mut out = vec![T::zero(); b * d];
    for (s, chunk) in t.data().chunks(per.max(1)).take(b).enumerate() {
        for row in chunk.chunks_exact(d) {
            for (o, &v) in out[s * d..(s + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    Tensor::from_parts(vec![b, d], out)
}

/// Per-sample weight (`[b, r, d]`) and bias (`[b, r]`) gradients of a linear
/// map from activations `[b, ..., d]` and highway gradients `[b, ..., r]`.
pub fn per_sample_rule_linear<T: Scalar>(acts: &Tensor<T>, highway: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let weight = Tensor::batched_outer(highway, acts)?;
    let b = highway.shape()[0];
    Ok((weight, sum_middle(highway, b)))
}

/// Dense per-sample embedding gradients `[b, vocab, dim]`: each sample's
/// highway rows are scatter-added into the rows of the tokens it used.
pub fn per_sample_rule_embedding<T: Scalar>(indices: &Tensor<T>, highway: &Tensor<T>, vocab: usize) -> Result<Tensor<T>> {
    let b = *indices.shape().first().ok_or_else(|| dim_err("embedding indices need a batch dimension"))?;
    let dim = *highway.shape().last().ok_or_else(|| dim_err("embedding highway gradient is a scalar"))?;
    if highway.numel() != indices.numel() * dim {
        return Err(dim_err(format!(
            "embedding highway {:?} does not match indices {:?}",
            highway.shape(),
            indices.shape()
        )));
    }
    let ids = nn::embedding_indices(indices, vocab)?;
    let tokens = ids.len() / b.max(1);
    let mut out = vec![T::zero(); b * vocab * dim];
    for (pos, &id) in ids.iter().enumerate() {
        let s = pos / tokens;
        let src = &highway.data()[pos * dim..(pos + 1) * dim];
        let dst = &mut out[(s * vocab + id) * dim..(s * vocab + id + 1) * dim];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d += v;
        }
    }
    Ok(Tensor::from_parts(vec![b, vocab, dim], out))
}

/// Per-sample scale (`γ`) and shift (`β`) gradients of a normalization
/// layer, given the cached normalized input. `channel_of(pos)` maps a
/// position within one sample to its affine parameter index.
pub fn per_sample_rule_normalization<T: Scalar>(
    xhat: &Tensor<T>,
    highway: &Tensor<T>,
    param_len: usize,
    channel_of: impl Fn(usize) -> usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if xhat.shape() != highway.shape() {
        return Err(dim_err(format!("normalized input {:?} vs highway {:?}", xhat.shape(), highway.shape())));
    }
    let b = xhat.shape()[0];
    let per = xhat.numel() / b.max(1);
    let mut gamma = vec![T::zero(); b * param_len];
    let mut beta = vec![T::zero(); b * param_len];
    for s in 0..b {
        let hw = &highway.data()[s * per..(s + 1) * per];
        let xh = &xhat.data()[s * per..(s + 1) * per];
        for (pos, (&h, &x)) in hw.iter().zip(xh).enumerate() {
            let c = s * param_len + channel_of(pos);
            gamma[c] += h * x;
            beta[c] += h;
        }
    }
    Ok((Tensor::from_parts(vec![b, param_len], gamma), Tensor::from_parts(vec![b, param_len], beta)))
}

/// Per-sample conv2d gradients: im2col-unfold the cached input, then apply
/// the linear rule to `[b, positions, patch]` activations.
pub fn per_sample_rule_conv2d<T: Scalar>(
    input: &Tensor<T>,
    highway: &Tensor<T>,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let cols = im2col(input, kernel, stride, padding)?;
    let (b, l) = (cols.shape()[0], cols.shape()[1]);
    let out_channels = highway.shape().get(1).copied().ok_or_else(|| dim_err("conv2d highway must be 4-d"))?;
    let hw_rows = highway.reshape([b, out_channels, l])?.transpose_last2()?;
    per_sample_rule_linear(&cols, &hw_rows)
}

fn with_batch(shape: &[usize], b: usize) -> Vec<usize> {
    let mut s = vec![b];
    s.extend_from_slice(shape);
    s
}

fn linear_rule<T: Scalar>(layer: &Layer<T>, cache: &LayerCache<T>, highway: &Tensor<T>) -> Result<ParameterSet<T>> {
    let (weight, bias) = per_sample_rule_linear(&cache.input, highway)?;
    let mut out = ParameterSet::new().with("weight", weight);
    if layer.params.get("bias").is_some() {
        out.insert("bias", bias);
    }
    Ok(out)
}

fn embedding_rule<T: Scalar>(layer: &Layer<T>, cache: &LayerCache<T>, highway: &Tensor<T>) -> Result<ParameterSet<T>> {
    let LayerDescriptor::Embedding { num_embeddings, .. } = layer.descriptor else {
        return Err(DpError::Registry(format!("embedding rule applied to `{}`", layer.kind())));
    };
    Ok(ParameterSet::new().with("weight", per_sample_rule_embedding(&cache.input, highway, num_embeddings)?))
}

fn conv2d_rule<T: Scalar>(layer: &Layer<T>, cache: &LayerCache<T>, highway: &Tensor<T>) -> Result<ParameterSet<T>> {
    let LayerDescriptor::Conv2d { kernel_size, stride, padding, bias, .. } = layer.descriptor else {
        return Err(DpError::Registry(format!("conv2d rule applied to `{}`", layer.kind())));
    };
    let (weight, bias_grad) = per_sample_rule_conv2d(&cache.input, highway, kernel_size, stride, padding)?;
    let b = weight.shape()[0];
    let wshape = with_batch(layer.params.require("weight")?.shape(), b);
    let mut out = ParameterSet::new().with("weight", weight.reshape(wshape)?);
    if bias {
        out.insert("bias", bias_grad);
    }
    Ok(out)
}

fn norm_rule<T: Scalar>(layer: &Layer<T>, cache: &LayerCache<T>, highway: &Tensor<T>) -> Result<ParameterSet<T>> {
    let CacheExtra::Normalized { xhat, .. } = &cache.extra else {
        return Err(DpError::Lifecycle(format!("{} cache holds no normalized input", layer.kind())));
    };
    let b = xhat.shape()[0];
    let (gamma, beta) = match &layer.descriptor {
        LayerDescriptor::LayerNorm { normalized_shape, .. } => {
            let d: usize = normalized_shape.iter().product();
            let (g, be) = per_sample_rule_normalization(xhat, highway, d, |pos| pos % d)?;
            let shape = with_batch(normalized_shape, b);
            (g.reshape(shape.clone())?, be.reshape(shape)?)
        }
        LayerDescriptor::GroupNorm { num_channels, .. } => {
            let spatial: usize = xhat.shape()[2..].iter().product();
            per_sample_rule_normalization(xhat, highway, *num_channels, |pos| pos / spatial)?
        }
        other => return Err(DpError::Registry(format!("normalization rule applied to `{}`", other.kind()))),
    };
    Ok(ParameterSet::new().with("weight", gamma).with("bias", beta))
}
