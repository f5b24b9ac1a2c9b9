use super::conv::{col2im, im2col};
use super::{CacheExtra, Layer, LayerCache, LayerDescriptor, ParameterSet};
use crate::error::{dim_err, param_err, DpError, Result};
use crate::tensor::{Scalar, Tensor};

pub(super) fn forward_layer<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>) -> Result<(Tensor<T>, CacheExtra<T>)> {
    let p = &layer.params;
    match &layer.descriptor {
        LayerDescriptor::Linear { in_features, out_features, .. } => {
            let out = linear_forward(x, p.require("weight")?, p.get("bias"), *in_features, *out_features)?;
            Ok((out, CacheExtra::None))
        }
        LayerDescriptor::Embedding { num_embeddings, embedding_dim } => {
            let table = p.require("weight")?;
            let ids = embedding_indices(x, *num_embeddings)?;
            let mut data = Vec::with_capacity(ids.len() * embedding_dim);
            for id in ids {
                data.extend_from_slice(&table.data()[id * embedding_dim..(id + 1) * embedding_dim]);
            }
            let mut shape = x.shape().to_vec();
            shape.push(*embedding_dim);
            Ok((Tensor::from_parts(shape, data), CacheExtra::None))
        }
        LayerDescriptor::Conv2d { in_channels, out_channels, kernel_size, stride, padding, .. } => {
            if x.ndim() != 4 || x.shape()[1] != *in_channels {
                return Err(dim_err(format!(
                    "conv2d expects [b, {in_channels}, h, w] input, got {:?}",
                    x.shape()
                )));
            }
            let cols = im2col(x, *kernel_size, *stride, *padding)?;
            let (b, l, k) = (cols.shape()[0], cols.shape()[1], cols.shape()[2]);
            let w = p.require("weight")?.reshape([*out_channels, k])?;
            // [b, L, out] -> [b, out, L]
            let rows = linear_forward(&cols, &w, p.get("bias"), k, *out_channels)?;
            let out = rows.transpose_last2()?;
            let out_h = super::conv::conv_output_size(x.shape()[2], kernel_size[0], stride[0], padding[0])?;
            let out_w = l / out_h;
            Ok((out.reshape([b, *out_channels, out_h, out_w])?, CacheExtra::None))
        }
        LayerDescriptor::LayerNorm { normalized_shape, eps } => {
            let block = layer_norm_block(x, normalized_shape)?;
            let (xhat, inv_std) = normalize_blocks(x, block, *eps);
            let out = affine(&xhat, block, p, |_, pos| pos)?;
            Ok((out, CacheExtra::Normalized { xhat, inv_std }))
        }
        LayerDescriptor::GroupNorm { num_groups, num_channels, eps } => {
            let (block, spatial) = group_norm_block(x, *num_groups, *num_channels)?;
            let (xhat, inv_std) = normalize_blocks(x, block, *eps);
            let per_group = num_channels / num_groups;
            let out = affine(&xhat, block, p, |b, pos| (b % num_groups) * per_group + pos / spatial)?;
            Ok((out, CacheExtra::Normalized { xhat, inv_std }))
        }
        LayerDescriptor::Relu => Ok((x.map(|v| if v > T::zero() { v } else { T::zero() }), CacheExtra::None)),
        LayerDescriptor::Flatten => {
            if x.ndim() < 1 {
                return Err(dim_err("flatten needs a batch dimension"));
            }
            let b = x.shape()[0];
            let rest: usize = x.shape()[1..].iter().product();
            Ok((x.reshape([b, rest])?, CacheExtra::None))
        }
        LayerDescriptor::InstanceNorm { num_features, track_running_stats: false, eps } => {
            let (block, _) = group_norm_block(x, *num_features, *num_features)?;
            let (xhat, inv_std) = normalize_blocks(x, block, *eps);
            Ok((xhat.clone(), CacheExtra::Normalized { xhat, inv_std }))
        }
        LayerDescriptor::BatchNorm { .. } | LayerDescriptor::InstanceNorm { .. } => Err(DpError::Lifecycle(format!(
            "{} layers that share or track batch statistics have no forward pass",
            layer.kind()
        ))),
        LayerDescriptor::Custom { name } => {
            let module = layer
                .custom_module()
                .ok_or_else(|| DpError::Registry(format!("custom layer `{name}` has no module")))?;
            Ok((module.forward(p, x)?, CacheExtra::None))
        }
    }
}

pub(super) fn backward_input_layer<T: Scalar>(layer: &Layer<T>, g: &Tensor<T>, cache: &LayerCache<T>) -> Result<Tensor<T>> {
    let p = &layer.params;
    let x = &cache.input;
    match &layer.descriptor {
        LayerDescriptor::Linear { in_features, out_features, .. } => {
            linear_backward_input(g, p.require("weight")?, *in_features, *out_features, x.shape())
        }
        // Indices are not differentiable.
        LayerDescriptor::Embedding { .. } => Ok(Tensor::zeros(x.shape().to_vec())),
        LayerDescriptor::Conv2d { out_channels, kernel_size, stride, padding, in_channels, .. } => {
            let b = g.shape()[0];
            let l = g.numel() / (b * out_channels);
            let k = in_channels * kernel_size[0] * kernel_size[1];
            let g_rows = g.reshape([b, *out_channels, l])?.transpose_last2()?;
            let w = p.require("weight")?.reshape([*out_channels, k])?;
            let dcols = linear_backward_input(&g_rows, &w, k, *out_channels, &[b, l, k])?;
            col2im(&dcols, x.shape(), *kernel_size, *stride, *padding)
        }
        LayerDescriptor::LayerNorm { normalized_shape, .. } => {
            let block: usize = normalized_shape.iter().product();
            norm_backward_input(g, cache, block, Some(p.require("weight")?.data()), |_, pos| pos)
        }
        LayerDescriptor::GroupNorm { num_groups, num_channels, .. } => {
            let (block, spatial) = group_norm_block(x, *num_groups, *num_channels)?;
            let per_group = num_channels / num_groups;
            norm_backward_input(g, cache, block, Some(p.require("weight")?.data()), |b, pos| (b % num_groups) * per_group + pos / spatial)
        }
        LayerDescriptor::Relu => {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        LayerDescriptor::Flatten => g.reshape(x.shape().to_vec()),
        LayerDescriptor::InstanceNorm { num_features, track_running_stats: false, .. } => {
            let (block, _) = group_norm_block(x, *num_features, *num_features)?;
            norm_backward_input(g, cache, block, None, |_, _| 0)
        }
        LayerDescriptor::BatchNorm { .. } | LayerDescriptor::InstanceNorm { .. } => Err(DpError::Lifecycle(format!(
            "{} layers have no backward pass",
            layer.kind()
        ))),
        LayerDescriptor::Custom { name } => layer
            .custom_module()
            .ok_or_else(|| DpError::Registry(format!("custom layer `{name}` has no module")))?
            .backward_input(p, x, g),
    }
}

/// Batch-summed parameter gradients. Written independently of the
/// per-sample rules (direct loops or a single matrix product), so the
/// micro-batch oracle does not share code with the vectorized path.
pub(super) fn backward_params_layer<T: Scalar>(layer: &Layer<T>, g: &Tensor<T>, cache: &LayerCache<T>) -> Result<ParameterSet<T>> {
    let p = &layer.params;
    let x = &cache.input;
    match &layer.descriptor {
        LayerDescriptor::Linear { in_features, out_features, bias } => {
            let rows = x.numel() / in_features;
            let xm = x.reshape([rows, *in_features])?;
            let gm = g.reshape([rows, *out_features])?;
            let dw = gm.reshape([1, rows, *out_features])?.transpose_last2()?.reshape([*out_features, rows])?.matmul(&xm)?;
            let mut out = ParameterSet::new().with("weight", dw);
            if *bias {
                out.insert("bias", gm.sum_leading()?);
            }
            Ok(out)
        }
        LayerDescriptor::Embedding { num_embeddings, embedding_dim } => {
            let ids = embedding_indices(x, *num_embeddings)?;
            let mut table = vec![T::zero(); num_embeddings * embedding_dim];
            for (pos, id) in ids.into_iter().enumerate() {
                let src = &g.data()[pos * embedding_dim..(pos + 1) * embedding_dim];
                for (d, &s) in table[id * embedding_dim..(id + 1) * embedding_dim].iter_mut().zip(src) {
                    *d += s;
                }
            }
            Ok(ParameterSet::new().with("weight", Tensor::from_parts(vec![*num_embeddings, *embedding_dim], table)))
        }
        LayerDescriptor::Conv2d { in_channels, out_channels, kernel_size, stride, padding, bias } => {
            let [b, c, h, w] = <[usize; 4]>::try_from(x.shape()).map_err(|_| dim_err("conv2d cache is not 4-d"))?;
            let [_, o, oh, ow] = <[usize; 4]>::try_from(g.shape()).map_err(|_| dim_err("conv2d grad is not 4-d"))?;
            debug_assert_eq!((c, o), (*in_channels, *out_channels));
            let [kh, kw] = *kernel_size;
            let mut dw = vec![T::zero(); o * c * kh * kw];
            let mut db = vec![T::zero(); o];
            let (xd, gd) = (x.data(), g.data());
            for n in 0..b {
                for oc in 0..o {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let gv = gd[((n * o + oc) * oh + y) * ow + xo];
                            db[oc] += gv;
                            for ic in 0..c {
                                for i in 0..kh {
                                    let Some(iy) = (y * stride[0] + i).checked_sub(padding[0]).filter(|&v| v < h) else {
                                        continue;
                                    };
                                    for j in 0..kw {
                                        let Some(ix) = (xo * stride[1] + j).checked_sub(padding[1]).filter(|&v| v < w) else {
                                            continue;
                                        };
                                        dw[((oc * c + ic) * kh + i) * kw + j] += gv * xd[((n * c + ic) * h + iy) * w + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut out = ParameterSet::new().with("weight", Tensor::from_parts(vec![o, c, kh, kw], dw));
            if *bias {
                out.insert("bias", Tensor::from_parts(vec![o], db));
            }
            Ok(out)
        }
        LayerDescriptor::LayerNorm { normalized_shape, .. } => {
            let block: usize = normalized_shape.iter().product();
            norm_backward_params(g, cache, block, normalized_shape.clone(), |_, pos| pos)
        }
        LayerDescriptor::GroupNorm { num_groups, num_channels, .. } => {
            let (block, spatial) = group_norm_block(x, *num_groups, *num_channels)?;
            let per_group = num_channels / num_groups;
            norm_backward_params(g, cache, block, vec![*num_channels], |b, pos| {
                (b % num_groups) * per_group + pos / spatial
            })
        }
        LayerDescriptor::Relu
        | LayerDescriptor::Flatten
        | LayerDescriptor::InstanceNorm { track_running_stats: false, .. } => Ok(ParameterSet::new()),
        LayerDescriptor::BatchNorm { .. } | LayerDescriptor::InstanceNorm { .. } => Err(DpError::Lifecycle(format!(
            "{} layers have no backward pass",
            layer.kind()
        ))),
        LayerDescriptor::Custom { name } => layer
            .custom_module()
            .ok_or_else(|| DpError::Registry(format!("custom layer `{name}` has no module")))?
            .backward_params(p, x, g),
    }
}

/// `y = x W^T + bias` applied to every trailing `in`-vector of `x`.
fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, n_in: usize, n_out: usize) -> Result<Tensor<T>> {
    if x.ndim() < 2 || x.shape()[x.ndim() - 1] != n_in {
        return Err(dim_err(format!("linear expects [b, ..., {n_in}] input, got {:?}", x.shape())));
    }
    let rows = x.numel() / n_in;
    let wd = w.data();
    let mut out = Vec::with_capacity(rows * n_out);
    for row in x.data().chunks_exact(n_in) {
        for o in 0..n_out {
            let mut acc = bias.map_or(T::zero(), |b| b.data()[o]);
            for (&wv, &xv) in wd[o * n_in..(o + 1) * n_in].iter().zip(row) {
                acc += wv * xv;
            }
            out.push(acc);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank checked") = n_out;
    debug_assert_eq!(out.len(), rows * n_out);
    Ok(Tensor::from_parts(shape, out))
}

fn linear_backward_input<T: Scalar>(g: &Tensor<T>, w: &Tensor<T>, n_in: usize, n_out: usize, in_shape: &[usize]) -> Result<Tensor<T>> {
    let wd = w.data();
    let mut out = vec![T::zero(); g.numel() / n_out * n_in];
    for (grow, orow) in g.data().chunks_exact(n_out).zip(out.chunks_exact_mut(n_in)) {
        for (o, &gv) in grow.iter().enumerate() {
            for (d, &wv) in orow.iter_mut().zip(&wd[o * n_in..(o + 1) * n_in]) {
                *d += gv * wv;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out)
}

pub(crate) fn embedding_indices<T: Scalar>(x: &Tensor<T>, vocab: usize) -> Result<Vec<usize>> {
    x.data()
        .iter()
        .map(|&v| {
            let f = v.as_f64();
            if f < 0.0 || f.fract() != 0.0 || f >= vocab as f64 {
                Err(param_err(format!("embedding index {f} outside vocabulary of {vocab}")))
            } else {
                Ok(f as usize)
            }
        })
        .collect()
}

fn layer_norm_block<T: Scalar>(x: &Tensor<T>, normalized_shape: &[usize]) -> Result<usize> {
    let r = x.ndim();
    if r <= normalized_shape.len() || x.shape()[r - normalized_shape.len()..] != *normalized_shape {
        return Err(dim_err(format!(
            "layer_norm over {:?} cannot apply to input {:?}",
            normalized_shape,
            x.shape()
        )));
    }
    Ok(normalized_shape.iter().product())
}

/// Returns (elements per group block, spatial size per channel).
pub(crate) fn group_norm_block<T: Scalar>(x: &Tensor<T>, groups: usize, channels: usize) -> Result<(usize, usize)> {
    if x.ndim() < 2 || x.shape()[1] != channels {
        return Err(dim_err(format!("group_norm expects [b, {channels}, ...] input, got {:?}", x.shape())));
    }
    let spatial: usize = x.shape()[2..].iter().product();
    Ok((channels / groups * spatial, spatial))
}

/// Normalizes each contiguous block of `block` elements to zero mean and unit
/// (biased) variance.
fn normalize_blocks<T: Scalar>(x: &Tensor<T>, block: usize, eps: f64) -> (Tensor<T>, Vec<T>) {
    let mut xhat = Vec::with_capacity(x.numel());
    let mut inv_stds = Vec::with_capacity(x.numel() / block);
    for chunk in x.data().chunks_exact(block) {
        let n = block as f64;
        let mean = chunk.iter().fold(0.0, |a, v| a + v.as_f64()) / n;
        let var = chunk.iter().fold(0.0, |a, v| a + (v.as_f64() - mean).powi(2)) / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        xhat.extend(chunk.iter().map(|v| T::of((v.as_f64() - mean) * inv_std)));
        inv_stds.push(T::of(inv_std));
    }
    (Tensor::from_parts(x.shape().to_vec(), xhat), inv_stds)
}

fn affine<T: Scalar>(xhat: &Tensor<T>, block: usize, p: &ParameterSet<T>, index: impl Fn(usize, usize) -> usize) -> Result<Tensor<T>> {
    let (gamma, beta) = (p.require("weight")?.data(), p.require("bias")?.data());
    let mut out = Vec::with_capacity(xhat.numel());
    for (b, chunk) in xhat.data().chunks_exact(block).enumerate() {
        for (pos, &v) in chunk.iter().enumerate() {
            let i = index(b, pos);
            out.push(v * gamma[i] + beta[i]);
        }
    }
    Ok(Tensor::from_parts(xhat.shape().to_vec(), out))
}

fn normalized<T: Scalar>(cache: &LayerCache<T>) -> Result<(&Tensor<T>, &[T])> {
    match &cache.extra {
        CacheExtra::Normalized { xhat, inv_std } => Ok((xhat, inv_std)),
        CacheExtra::None => Err(DpError::Lifecycle("normalization cache missing normalized input".into())),
    }
}

fn norm_backward_input<T: Scalar>(
    g: &Tensor<T>,
    cache: &LayerCache<T>,
    block: usize,
    gamma: Option<&[T]>,
    index: impl Fn(usize, usize) -> usize,
) -> Result<Tensor<T>> {
    let (xhat, inv_std) = normalized(cache)?;
    let n = block as f64;
    let mut out = Vec::with_capacity(g.numel());
    let mut gh = vec![0.0f64; block];
    for (b, (gc, xc)) in g.data().chunks_exact(block).zip(xhat.data().chunks_exact(block)).enumerate() {
        let (mut m1, mut m2) = (0.0, 0.0);
        for (pos, (&gv, &xv)) in gc.iter().zip(xc).enumerate() {
            let v = gv.as_f64() * gamma.map_or(1.0, |gm| gm[index(b, pos)].as_f64());
            gh[pos] = v;
            m1 += v;
            m2 += v * xv.as_f64();
        }
        let (m1, m2) = (m1 / n, m2 / n);
        let s = inv_std[b].as_f64();
        out.extend(gh.iter().zip(xc).map(|(&v, &xv)| T::of(s * (v - m1 - xv.as_f64() * m2))));
    }
    Ok(Tensor::from_parts(g.shape().to_vec(), out))
}

fn norm_backward_params<T: Scalar>(
    g: &Tensor<T>,
    cache: &LayerCache<T>,
    block: usize,
    param_shape: Vec<usize>,
    index: impl Fn(usize, usize) -> usize,
) -> Result<ParameterSet<T>> {
    let (xhat, _) = normalized(cache)?;
    let size: usize = param_shape.iter().product();
    let mut dgamma = vec![T::zero(); size];
    let mut dbeta = vec![T::zero(); size];
    for (b, (gc, xc)) in g.data().chunks_exact(block).zip(xhat.data().chunks_exact(block)).enumerate() {
        for (pos, (&gv, &xv)) in gc.iter().zip(xc).enumerate() {
            let i = index(b, pos);
            dgamma[i] += gv * xv;
            dbeta[i] += gv;
        }
    }
    Ok(ParameterSet::new()
        .with("weight", Tensor::from_parts(param_shape.clone(), dgamma))
        .with("bias", Tensor::from_parts(param_shape, dbeta)))
}
