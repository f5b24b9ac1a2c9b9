//! Pre-training checks for layer configurations that break per-sample
//! privacy guarantees.
//!
//! The checks are not exhaustive. A model can pass them and still mix
//! information across samples, for example through a custom layer that
//! computes batch statistics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grad_sample::GradSamplerRegistry;
use crate::nn::{LayerDescriptor, ModelGraph};
use crate::rng::RngStream;
use crate::tensor::Scalar;

/// Largest group count usable when a batch norm is swapped for group norm.
pub const MAX_REPLACEMENT_GROUPS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub layer_index: usize,
    pub kind: String,
    pub reason: String,
    pub fixable: bool,
    pub suggested_replacement: Option<LayerDescriptor>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer={} kind={} reason={}", self.layer_index, self.kind, self.reason)
    }
}

/// Group count for a group norm replacing a batch norm over `channels`
/// channels: the largest divisor of `channels` not above 32.
pub fn replacement_groups(channels: usize) -> usize {
    (1..=channels.min(MAX_REPLACEMENT_GROUPS)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

fn replacement(desc: &LayerDescriptor) -> Option<LayerDescriptor> {
    match *desc {
        LayerDescriptor::BatchNorm { num_features, eps } => Some(LayerDescriptor::GroupNorm {
            num_groups: replacement_groups(num_features),
            num_channels: num_features,
            eps,
        }),
        LayerDescriptor::InstanceNorm { num_features, track_running_stats: true, eps } => {
            Some(LayerDescriptor::InstanceNorm { num_features, track_running_stats: false, eps })
        }
        _ => None,
    }
}

fn check_layer<T: Scalar>(
    index: usize,
    desc: &LayerDescriptor,
    has_params: bool,
    registry: &GradSamplerRegistry<T>,
) -> Option<Violation> {
    let reason = match desc {
        LayerDescriptor::BatchNorm { .. } => {
            "batch normalization shares information across the samples of a batch".to_string()
        }
        LayerDescriptor::InstanceNorm { track_running_stats: true, .. } => {
            "running statistics are tracked across samples and are not covered by the privacy guarantee".to_string()
        }
        _ if has_params && !registry.contains(desc.kind()) => {
            format!("no per-sample gradient rule is registered for layer kind `{}`", desc.kind())
        }
        _ => return None,
    };
    let suggested_replacement = replacement(desc);
    Some(Violation {
        layer_index: index,
        kind: desc.kind().to_string(),
        reason,
        fixable: suggested_replacement.is_some(),
        suggested_replacement,
    })
}

/// Validates a model file's layer list. Custom layers are assumed to own
/// parameters, so they need a registered rule.
pub fn validate<T: Scalar>(descriptors: &[LayerDescriptor], registry: &GradSamplerRegistry<T>) -> Vec<Violation> {
    descriptors
        .iter()
        .enumerate()
        .filter_map(|(i, d)| {
            let has_params = matches!(d, LayerDescriptor::Custom { .. }) || !d.param_shapes().is_empty();
            check_layer(i, d, has_params, registry)
        })
        .collect()
}

/// Validates a built model, using each layer's actual parameters.
pub fn validate_model<T: Scalar>(model: &ModelGraph<T>, registry: &GradSamplerRegistry<T>) -> Vec<Violation> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, layer)| check_layer(i, &layer.descriptor, !layer.params.is_empty(), registry))
        .collect()
}

/// Rewrites fixable layers: batch norm becomes group norm over the same
/// channels, and instance norm stops tracking running statistics.
pub fn suggest_fix(descriptors: &[LayerDescriptor]) -> Vec<LayerDescriptor> {
    descriptors.iter().map(|d| replacement(d).unwrap_or_else(|| d.clone())).collect()
}

/// [`suggest_fix`] applied to a built model. Replaced layers get fresh
/// parameters; all other layers are kept as they are.
pub fn suggest_fix_model<T: Scalar>(model: &ModelGraph<T>, rng: &mut RngStream) -> Result<ModelGraph<T>> {
    let mut fixed = model.clone();
    for (i, layer) in model.layers().iter().enumerate() {
        if let Some(desc) = replacement(&layer.descriptor) {
            fixed.replace_layer(i, desc, rng)?;
        }
    }
    Ok(fixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::forward;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn registry() -> GradSamplerRegistry<f64> {
        GradSamplerRegistry::with_builtin_rules()
    }

    fn mlp() -> Vec<LayerDescriptor> {
        vec![
            LayerDescriptor::Linear { in_features: 4, out_features: 8, bias: true },
            LayerDescriptor::Relu,
            LayerDescriptor::Linear { in_features: 8, out_features: 2, bias: true },
        ]
    }

    fn conv_bn(channels: usize) -> Vec<LayerDescriptor> {
        vec![
            LayerDescriptor::Conv2d { in_channels: 3, out_channels: channels, kernel_size: [3, 3], stride: [1, 1], padding: [1, 1], bias: true },
            LayerDescriptor::BatchNorm { num_features: channels, eps: 1e-5 },
            LayerDescriptor::Relu,
        ]
    }

    #[test]
    fn clean_mlp() {
        assert!(validate(&mlp(), &registry()).is_empty());
    }

    #[test]
    fn batch_norm_is_located_and_fixable() {
        let v = validate(&conv_bn(64), &registry());
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].layer_index, v[0].kind.as_str(), v[0].fixable), (1, "batch_norm", true));
        assert_eq!(
            v[0].suggested_replacement,
            Some(LayerDescriptor::GroupNorm { num_groups: 32, num_channels: 64, eps: 1e-5 })
        );
        assert!(v[0].to_string().starts_with("layer=1 kind=batch_norm reason="));
    }

    #[test]
    fn instance_norm_flag() {
        let with = [LayerDescriptor::InstanceNorm { num_features: 4, track_running_stats: true, eps: 1e-5 }];
        let without = [LayerDescriptor::InstanceNorm { num_features: 4, track_running_stats: false, eps: 1e-5 }];
        let v = validate(&with, &registry());
        assert_eq!(v.len(), 1);
        assert!(v[0].fixable);
        assert!(validate(&without, &registry()).is_empty());
        assert_eq!(suggest_fix(&with), without.to_vec());
    }

    #[test]
    fn unregistered_kind_is_not_fixable() {
        let descs = [LayerDescriptor::Custom { name: "attention".into() }];
        let v = validate(&descs, &registry());
        assert_eq!(v.len(), 1);
        assert!(!v[0].fixable && v[0].suggested_replacement.is_none());
        assert!(v[0].reason.contains("attention"));
        let empty = GradSamplerRegistry::<f64>::empty();
        assert_eq!(validate(&mlp(), &empty).len(), 2);
    }

    #[test]
    fn group_rule() {
        assert_eq!(replacement_groups(64), 32);
        assert_eq!(replacement_groups(16), 16);
        assert_eq!(replacement_groups(48), 24);
        assert_eq!(replacement_groups(37), 1);
        assert_eq!(replacement_groups(1), 1);
    }

    #[test]
    fn fixed_model_keeps_shapes() {
        let mut rng = RngStream::seeded(4);
        let broken = ModelGraph::<f64>::from_descriptors(&conv_bn(64), &mut rng).unwrap();
        let fixed = suggest_fix_model(&broken, &mut rng).unwrap();
        assert!(validate_model(&fixed, &registry()).is_empty());
        assert_eq!(fixed.layers()[0].params, broken.layers()[0].params);

        // The conv output feeds the replacement unchanged in shape.
        let x = Tensor::<f64>::zeros([2, 3, 5, 5]);
        let prefix = ModelGraph::<f64>::from_descriptors(&conv_bn(64)[..1], &mut rng).unwrap();
        let (mid, _) = forward(&prefix, &x).unwrap();
        let (out, _) = forward(&fixed, &x).unwrap();
        assert_eq!(out.shape(), mid.shape());
    }

    #[test]
    fn fix_is_idempotent_on_valid_models() {
        assert_eq!(suggest_fix(&mlp()), mlp());
        let fixed = suggest_fix(&conv_bn(12));
        assert_eq!(suggest_fix(&fixed), fixed);
    }

    fn any_layer() -> impl Strategy<Value = LayerDescriptor> {
        prop_oneof![
            (1usize..8, 1usize..8).prop_map(|(i, o)| LayerDescriptor::Linear { in_features: i, out_features: o, bias: true }),
            Just(LayerDescriptor::Relu),
            Just(LayerDescriptor::Flatten),
            (1usize..80).prop_map(|c| LayerDescriptor::BatchNorm { num_features: c, eps: 1e-5 }),
            (1usize..8, any::<bool>())
                .prop_map(|(c, t)| LayerDescriptor::InstanceNorm { num_features: c, track_running_stats: t, eps: 1e-5 }),
            (1usize..5).prop_map(|g| LayerDescriptor::GroupNorm { num_groups: g, num_channels: 2 * g, eps: 1e-5 }),
        ]
    }

    proptest! {
        #[test]
        fn fix_closes_fixable_violations(descs in prop::collection::vec(any_layer(), 0..10)) {
            let reg = registry();
            let v = validate(&descs, &reg);
            prop_assert!(v.iter().all(|x| x.fixable && x.layer_index < descs.len() && !x.reason.is_empty()));
            prop_assert_eq!(validate(&descs, &reg), v);
            prop_assert!(validate(&suggest_fix(&descs), &reg).is_empty());
        }
    }
}
