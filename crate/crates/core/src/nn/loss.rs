use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Per-sample mean of squared errors over the output features.
    Mse,
    /// Log-softmax followed by negative log-likelihood of the target class.
    SoftmaxCrossEntropy,
    /// Per-sample sum of outputs; seeds unit highway gradients. Ignores targets.
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T: Scalar = f32> {
    Classes(Vec<usize>),
    Values(Tensor<T>),
}

impl<T: Scalar> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(t) => t.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Result<Targets<T>> {
        match self {
            Targets::Classes(c) => indices
                .iter()
                .map(|&i| c.get(i).copied().ok_or_else(|| dim_err(format!("target index {i} out of range"))))
                .collect::<Result<_>>()
                .map(Targets::Classes),
            Targets::Values(t) => t.select_leading(indices).map(Targets::Values),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Targets<U> {
        match self {
            Targets::Classes(c) => Targets::Classes(c.clone()),
            Targets::Values(t) => Targets::Values(t.cast()),
        }
    }

    /// Elements per sample, used by the memory model.
    pub fn per_sample_elements(&self) -> usize {
        match self {
            Targets::Classes(_) => 1,
            Targets::Values(t) => t.shape()[1..].iter().product(),
        }
    }
}

/// Per-sample losses `[b]` and the gradient of each sample's own loss with
/// respect to its logits. The batch loss is the mean of the per-sample losses.
pub fn loss_forward_backward<T: Scalar>(kind: LossKind, logits: &Tensor<T>, targets: &Targets<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = *logits.shape().first().ok_or_else(|| dim_err("logits need a batch dimension"))?;
    if kind == LossKind::Sum {
        let per = logits.numel() / b.max(1);
        let losses = logits.data().chunks(per.max(1)).take(b).map(|c| T::of(c.iter().fold(0.0, |a, v| a + v.as_f64()))).collect();
        return Ok((Tensor::from_parts(vec![b], losses), Tensor::full(logits.shape().to_vec(), T::one())));
    }
    if logits.ndim() != 2 {
        return Err(dim_err(format!("{kind:?} expects [b, k] logits, got {:?}", logits.shape())));
    }
    if targets.len() != b {
        return Err(dim_err(format!("{} targets for a batch of {b}", targets.len())));
    }
    let k = logits.shape()[1];
    let mut losses = Vec::with_capacity(b);
    let mut grad = Vec::with_capacity(b * k);
    match (kind, targets) {
        (LossKind::Mse, Targets::Values(t)) => {
            if t.shape() != logits.shape() {
                return Err(dim_err(format!("mse targets {:?} vs logits {:?}", t.shape(), logits.shape())));
            }
            let scale = 1.0 / k as f64;
            for (row, trow) in logits.data().chunks_exact(k).zip(t.data().chunks_exact(k)) {
                let mut acc = 0.0;
                for (&y, &tv) in row.iter().zip(trow) {
                    let d = y.as_f64() - tv.as_f64();
                    acc += d * d;
                    grad.push(T::of(2.0 * d * scale));
                }
                losses.push(T::of(acc * scale));
            }
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(classes)) => {
            for (row, &class) in logits.data().chunks_exact(k).zip(classes) {
                if class >= k {
                    return Err(param_err(format!("target class {class} out of range for {k} classes")));
                }
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
                let denom: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
                let log_z = max + denom.ln();
                losses.push(T::of(log_z - row[class].as_f64()));
                for (j, v) in row.iter().enumerate() {
                    let p = (v.as_f64() - log_z).exp();
                    grad.push(T::of(if j == class { p - 1.0 } else { p }));
                }
            }
        }
        (LossKind::Mse, Targets::Classes(_)) => return Err(param_err("mse needs value targets")),
        (LossKind::SoftmaxCrossEntropy, Targets::Values(_)) => {
            return Err(param_err("cross-entropy needs class targets"))
        }
        (LossKind::Sum, _) => unreachable!("handled above"),
    }
    Ok((Tensor::from_parts(vec![b], losses), Tensor::from_parts(vec![b, k], grad)))
}
