//! Sequential models built from declarative layer descriptors.
//!
//! Backward passes are hand-written per layer kind. A forward pass returns a
//! [`ForwardCache`] holding every layer's input (plus normalization
//! intermediates); the per-sample gradient engine consumes exactly these
//! activations together with the highway gradients captured by [`backward`].

mod conv;
mod layers;
mod loss;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, DpError, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

pub use conv::{col2im, conv_output_size, im2col};
pub(crate) use layers::embedding_indices;
pub use loss::{loss_forward_backward, LossKind, Targets};

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

fn default_true() -> bool {
    true
}

fn default_eps() -> f64 {
    DEFAULT_NORM_EPS
}

fn default_stride() -> [usize; 2] {
    [1, 1]
}

/// One layer of a sequential model, as written in a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerDescriptor {
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Embedding {
        num_embeddings: usize,
        embedding_dim: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: [usize; 2],
        #[serde(default = "default_stride")]
        stride: [usize; 2],
        #[serde(default)]
        padding: [usize; 2],
        #[serde(default = "default_true")]
        bias: bool,
    },
    LayerNorm {
        normalized_shape: Vec<usize>,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    GroupNorm {
        num_groups: usize,
        num_channels: usize,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Relu,
    Flatten,
    /// Recognized for validation only.
    BatchNorm {
        num_features: usize,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// Recognized for validation only.
    InstanceNorm {
        num_features: usize,
        #[serde(default)]
        track_running_stats: bool,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// A user-defined layer; its behavior comes from a [`CustomModule`].
    Custom {
        name: String,
    },
}

impl LayerDescriptor {
    /// Registry key of this layer kind.
    pub fn kind(&self) -> &str {
        match self {
            LayerDescriptor::Linear { .. } => "linear",
            LayerDescriptor::Embedding { .. } => "embedding",
            LayerDescriptor::Conv2d { .. } => "conv2d",
            LayerDescriptor::LayerNorm { .. } => "layer_norm",
            LayerDescriptor::GroupNorm { .. } => "group_norm",
            LayerDescriptor::Relu => "relu",
            LayerDescriptor::Flatten => "flatten",
            LayerDescriptor::BatchNorm { .. } => "batch_norm",
            LayerDescriptor::InstanceNorm { .. } => "instance_norm",
            LayerDescriptor::Custom { name } => name,
        }
    }

    /// Shapes of the trainable parameters a layer of this kind owns.
    /// Custom layers declare their own.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerDescriptor::Linear { in_features, out_features, bias } => {
                let mut v = vec![("weight", vec![out_features, in_features])];
                if bias {
                    v.push(("bias", vec![out_features]));
                }
                v
            }
            LayerDescriptor::Embedding { num_embeddings, embedding_dim } => {
                vec![("weight", vec![num_embeddings, embedding_dim])]
            }
            LayerDescriptor::Conv2d { in_channels, out_channels, kernel_size, bias, .. } => {
                let mut v =
                    vec![("weight", vec![out_channels, in_channels, kernel_size[0], kernel_size[1]])];
                if bias {
                    v.push(("bias", vec![out_channels]));
                }
                v
            }
            LayerDescriptor::LayerNorm { ref normalized_shape, .. } => {
                vec![("weight", normalized_shape.clone()), ("bias", normalized_shape.clone())]
            }
            LayerDescriptor::GroupNorm { num_channels: c, .. }
            | LayerDescriptor::BatchNorm { num_features: c, .. } => {
                vec![("weight", vec![c]), ("bias", vec![c])]
            }
            LayerDescriptor::InstanceNorm { .. }
            | LayerDescriptor::Relu
            | LayerDescriptor::Flatten
            | LayerDescriptor::Custom { .. } => Vec::new(),
        }
    }

    pub fn check_hyperparams(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(param_err(format!("{} `{name}` must be positive", self.kind())))
            } else {
                Ok(())
            }
        };
        let eps_ok = |eps: f64| {
            if eps > 0.0 && eps.is_finite() {
                Ok(())
            } else {
                Err(param_err(format!("{} eps must be > 0, got {eps}", self.kind())))
            }
        };
        match self {
            LayerDescriptor::Linear { in_features, out_features, .. } => {
                positive("in_features", *in_features)?;
                positive("out_features", *out_features)
            }
            LayerDescriptor::Embedding { num_embeddings, embedding_dim } => {
                positive("num_embeddings", *num_embeddings)?;
                positive("embedding_dim", *embedding_dim)
            }
            LayerDescriptor::Conv2d { in_channels, out_channels, kernel_size, stride, .. } => {
                positive("in_channels", *in_channels)?;
                positive("out_channels", *out_channels)?;
                for &k in kernel_size.iter().chain(stride) {
                    positive("kernel_size/stride", k)?;
                }
                Ok(())
            }
            LayerDescriptor::LayerNorm { normalized_shape, eps } => {
                if normalized_shape.is_empty() {
                    return Err(param_err("layer_norm normalized_shape must be non-empty"));
                }
                for &d in normalized_shape {
                    positive("normalized_shape", d)?;
                }
                eps_ok(*eps)
            }
            LayerDescriptor::GroupNorm { num_groups, num_channels, eps } => {
                positive("num_groups", *num_groups)?;
                positive("num_channels", *num_channels)?;
                if num_channels % num_groups != 0 {
                    return Err(param_err(format!(
                        "group_norm: {num_channels} channels not divisible into {num_groups} groups"
                    )));
                }
                eps_ok(*eps)
            }
            LayerDescriptor::BatchNorm { num_features, eps }
            | LayerDescriptor::InstanceNorm { num_features, eps, .. } => {
                positive("num_features", *num_features)?;
                eps_ok(*eps)
            }
            LayerDescriptor::Relu | LayerDescriptor::Flatten => Ok(()),
            LayerDescriptor::Custom { name } => {
                if name.is_empty() {
                    Err(param_err("custom layer needs a non-empty name"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Named parameter tensors of one layer, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T: Scalar = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, tensor: Tensor<T>) -> Self {
        self.insert(name, tensor);
        self
    }

    /// Inserts or replaces `name`, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| param_err(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }
}

/// Behavior of a user-defined layer kind. The per-sample rule for the kind is
/// registered separately with the grad-sample registry.
pub trait CustomModule<T: Scalar>: Send + Sync {
    fn forward(&self, params: &ParameterSet<T>, input: &Tensor<T>) -> Result<Tensor<T>>;

    fn backward_input(
        &self,
        params: &ParameterSet<T>,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Tensor<T>>;

    /// Parameter gradients summed over the batch.
    fn backward_params(
        &self,
        params: &ParameterSet<T>,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<ParameterSet<T>>;
}

#[derive(Clone)]
pub struct Layer<T: Scalar = f32> {
    pub descriptor: LayerDescriptor,
    pub params: ParameterSet<T>,
    custom: Option<Arc<dyn CustomModule<T>>>,
}

impl<T: Scalar> fmt::Debug for Layer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Layer")
            .field("descriptor", &self.descriptor)
            .field("params", &self.params)
            .field("custom", &self.custom.is_some())
            .finish()
    }
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &str {
        self.descriptor.kind()
    }

    pub fn custom_module(&self) -> Option<&Arc<dyn CustomModule<T>>> {
        self.custom.as_ref()
    }

    pub fn cast<U: Scalar>(&self) -> Result<Layer<U>> {
        if self.custom.is_some() {
            return Err(param_err("custom layers cannot change precision"));
        }
        Ok(Layer { descriptor: self.descriptor.clone(), params: self.params.cast(), custom: None })
    }
}

/// Intermediates a normalization layer keeps for its backward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum CacheExtra<T: Scalar> {
    None,
    Normalized {
        /// Normalized input, same shape as the layer input.
        xhat: Tensor<T>,
        /// One entry per normalization group (rows for layer_norm,
        /// sample x group for group_norm).
        inv_std: Vec<T>,
    },
}

/// What one layer's forward pass left behind.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache<T: Scalar> {
    pub input: Tensor<T>,
    pub output_shape: Vec<usize>,
    pub extra: CacheExtra<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache<T: Scalar> {
    pub batch_size: usize,
    pub layers: Vec<LayerCache<T>>,
}

/// Ordered stack of layers.
#[derive(Clone, Debug, Default)]
pub struct ModelGraph<T: Scalar = f32> {
    layers: Vec<Layer<T>>,
}

fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut RngStream) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn init_params<T: Scalar>(desc: &LayerDescriptor, rng: &mut RngStream) -> Result<ParameterSet<T>> {
    let mut params = ParameterSet::new();
    let fan_in = match *desc {
        LayerDescriptor::Linear { in_features, .. } => in_features,
        LayerDescriptor::Conv2d { in_channels, kernel_size, .. } => {
            in_channels * kernel_size[0] * kernel_size[1]
        }
        _ => 1,
    };
    for (name, shape) in desc.param_shapes() {
        let t = match desc {
            LayerDescriptor::Linear { .. } | LayerDescriptor::Conv2d { .. } => {
                uniform_tensor(&shape, 1.0 / (fan_in as f64).sqrt(), rng)
            }
            LayerDescriptor::Embedding { .. } => Tensor::gaussian(shape, 1.0, rng)?,
            _ if name == "weight" => Tensor::full(shape, T::one()),
            _ => Tensor::zeros(shape),
        };
        params.insert(name, t);
    }
    Ok(params)
}

impl<T: Scalar> ModelGraph<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    /// Builds a model with freshly initialized parameters: uniform
    /// `±1/sqrt(fan_in)` for linear/conv, standard normal embedding tables,
    /// unit scale and zero shift for normalization.
    pub fn from_descriptors(descriptors: &[LayerDescriptor], rng: &mut RngStream) -> Result<Self> {
        let mut model = Self::new();
        for desc in descriptors {
            if let LayerDescriptor::Custom { name } = desc {
                return Err(param_err(format!(
                    "custom layer `{name}` needs a module; use push_custom"
                )));
            }
            desc.check_hyperparams()?;
            let params = init_params(desc, rng)?;
            model.layers.push(Layer { descriptor: desc.clone(), params, custom: None });
        }
        Ok(model)
    }

    /// Appends a built-in layer with explicit parameters.
    pub fn push(&mut self, descriptor: LayerDescriptor, params: ParameterSet<T>) -> Result<()> {
        descriptor.check_hyperparams()?;
        if matches!(descriptor, LayerDescriptor::Custom { .. }) {
            return Err(param_err("use push_custom for custom layers"));
        }
        for (name, shape) in descriptor.param_shapes() {
            let t = params.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(dim_err(format!(
                    "{} parameter `{name}` has shape {:?}, expected {:?}",
                    descriptor.kind(),
                    t.shape(),
                    shape
                )));
            }
        }
        if params.len() != descriptor.param_shapes().len() {
            return Err(param_err(format!("unexpected parameters for {}", descriptor.kind())));
        }
        self.layers.push(Layer { descriptor, params, custom: None });
        Ok(())
    }

    pub fn push_custom(
        &mut self,
        name: impl Into<String>,
        params: ParameterSet<T>,
        module: Arc<dyn CustomModule<T>>,
    ) -> Result<()> {
        let descriptor = LayerDescriptor::Custom { name: name.into() };
        descriptor.check_hyperparams()?;
        self.layers.push(Layer { descriptor, params, custom: Some(module) });
        Ok(())
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn descriptors(&self) -> Vec<LayerDescriptor> {
        self.layers.iter().map(|l| l.descriptor.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Total trainable parameter count `L`.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.params.numel()).sum()
    }

    /// Replaces one layer descriptor, re-initializing its parameters.
    pub fn replace_layer(&mut self, index: usize, descriptor: LayerDescriptor, rng: &mut RngStream) -> Result<()> {
        if index >= self.layers.len() {
            return Err(param_err(format!("layer index {index} out of range")));
        }
        descriptor.check_hyperparams()?;
        let params = init_params(&descriptor, rng)?;
        self.layers[index] = Layer { descriptor, params, custom: None };
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Result<ModelGraph<U>> {
        Ok(ModelGraph { layers: self.layers.iter().map(|l| l.cast()).collect::<Result<_>>()? })
    }

    /// Flat copy of every parameter, in layer then name order.
    pub fn flat_params(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().flat_map(|(_, t)| t.data().iter().copied()))
            .collect()
    }
}

fn at_layer(index: usize, kind: &str, err: DpError) -> DpError {
    match err {
        DpError::Dimension(msg) => DpError::Dimension(format!("layer {index} ({kind}): {msg}")),
        DpError::Parameter(msg) => DpError::Parameter(format!("layer {index} ({kind}): {msg}")),
        DpError::Lifecycle(msg) => DpError::Lifecycle(format!("layer {index} ({kind}): {msg}")),
        other => other,
    }
}

/// Runs the model on a batch, caching each layer's input.
pub fn forward<T: Scalar>(model: &ModelGraph<T>, input: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let batch_size = *input
        .shape()
        .first()
        .ok_or_else(|| dim_err("model input needs a leading batch dimension"))?;
    let mut caches = Vec::with_capacity(model.len());
    let mut current = input.clone();
    for (index, layer) in model.layers.iter().enumerate() {
        let (out, extra) = layers::forward_layer(layer, &current).map_err(|e| at_layer(index, layer.kind(), e))?;
        caches.push(LayerCache { input: current, output_shape: out.shape().to_vec(), extra });
        current = out;
    }
    Ok((current, ForwardCache { batch_size, layers: caches }))
}

/// Gradient of the loss with respect to one layer's input.
pub fn backward_input<T: Scalar>(layer: &Layer<T>, grad_out: &Tensor<T>, cache: Option<&LayerCache<T>>) -> Result<Tensor<T>> {
    let cache = cache.ok_or_else(|| {
        DpError::Lifecycle(format!("no forward cache for {} layer; run forward first", layer.kind()))
    })?;
    check_grad_shape(grad_out, cache)?;
    layers::backward_input_layer(layer, grad_out, cache)
}

/// Parameter gradients of one layer summed over the batch. This is the
/// plain (non-per-sample) backward used by ordinary SGD and by the
/// micro-batch oracle.
pub fn backward_params<T: Scalar>(layer: &Layer<T>, grad_out: &Tensor<T>, cache: Option<&LayerCache<T>>) -> Result<ParameterSet<T>> {
    let cache = cache.ok_or_else(|| {
        DpError::Lifecycle(format!("no forward cache for {} layer; run forward first", layer.kind()))
    })?;
    check_grad_shape(grad_out, cache)?;
    layers::backward_params_layer(layer, grad_out, cache)
}

fn check_grad_shape<T: Scalar>(grad_out: &Tensor<T>, cache: &LayerCache<T>) -> Result<()> {
    if grad_out.shape() != cache.output_shape.as_slice() {
        return Err(dim_err(format!(
            "gradient shape {:?} does not match layer output {:?}",
            grad_out.shape(),
            cache.output_shape
        )));
    }
    Ok(())
}

/// Output of a model-level backward pass.
#[derive(Clone, Debug)]
pub struct Backward<T: Scalar> {
    /// `highways[l]` is the loss gradient with respect to layer `l`'s output.
    pub highways: Vec<Tensor<T>>,
    pub input_grad: Tensor<T>,
}

/// Propagates `grad_output` from the last layer back to the input, capturing
/// the highway gradient at every layer.
pub fn backward<T: Scalar>(model: &ModelGraph<T>, cache: &ForwardCache<T>, grad_output: &Tensor<T>) -> Result<Backward<T>> {
    if cache.layers.len() != model.len() {
        return Err(DpError::Lifecycle(format!(
            "forward cache has {} layers, model has {}",
            cache.layers.len(),
            model.len()
        )));
    }
    let mut highways = vec![Tensor::zeros(Vec::<usize>::new()); model.len()];
    let mut grad = grad_output.clone();
    for (index, layer) in model.layers.iter().enumerate().rev() {
        let grad_in = backward_input(layer, &grad, cache.layers.get(index))
            .map_err(|e| at_layer(index, layer.kind(), e))?;
        highways[index] = std::mem::replace(&mut grad, grad_in);
    }
    Ok(Backward { highways, input_grad: grad })
}

/// Batch-summed parameter gradients for every layer, from captured highways.
pub fn param_gradients<T: Scalar>(model: &ModelGraph<T>, cache: &ForwardCache<T>, highways: &[Tensor<T>]) -> Result<Vec<ParameterSet<T>>> {
    model
        .layers
        .iter()
        .enumerate()
        .map(|(index, layer)| {
            if layer.params.is_empty() {
                return Ok(ParameterSet::new());
            }
            backward_params(layer, &highways[index], cache.layers.get(index))
                .map_err(|e| at_layer(index, layer.kind(), e))
        })
        .collect()
}

/// Mean-reduced batch gradient through the plain parameter backward, plus
/// the per-sample losses. This is what ordinary SGD steps on.
pub fn mean_batch_gradient<T: Scalar>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    targets: &Targets<T>,
    loss: LossKind,
) -> Result<(Vec<ParameterSet<T>>, Tensor<T>)> {
    let b = *input.shape().first().ok_or_else(|| dim_err("batch input needs a leading batch dimension"))?;
    if b == 0 {
        return Err(dim_err("mean_batch_gradient needs a non-empty batch"));
    }
    let (logits, cache) = forward(model, input)?;
    let (losses, grad_logits) = loss_forward_backward(loss, &logits, targets)?;
    let grad_logits = grad_logits.scale(T::of(1.0 / b as f64));
    let back = backward(model, &cache, &grad_logits)?;
    Ok((param_gradients(model, &cache, &back.highways)?, losses))
}
