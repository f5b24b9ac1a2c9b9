//! Dense row-major tensors.
//!
//! `Tensor<f32>` is the training type; `Tensor<f64>` is used by the
//! finite-difference and micro-batch oracles. Reductions run left to right in
//! a fixed order and accumulate in `f64`, so results are replayable.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{dim_err, param_err, Result};
use crate::rng::RngStream;

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor<{}>{:?} {:?}", T::NAME, self.shape, self.data)
        } else {
            write!(f, "Tensor<{}>{:?} [{} elements]", T::NAME, self.shape, self.data.len())
        }
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != data.len() {
            return Err(dim_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Constructor for internal callers that have already sized `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self { shape, data }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Converts element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(dim_err(format!(
                "matmul of {:?} and {:?}: inner extents disagree",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Per-batch-element contraction `n...i,n...j->nij`: sums the outer
    /// products of trailing vectors over every middle position.
    pub fn batched_outer(b_grads: &Tensor<T>, acts: &Tensor<T>) -> Result<Tensor<T>> {
        let (bs, as_) = (&b_grads.shape, &acts.shape);
        if bs.len() < 2 || as_.len() < 2 || bs.len() != as_.len() {
            return Err(dim_err(format!(
                "batched_outer needs matching ranks >= 2, got {:?} and {:?}",
                bs, as_
            )));
        }
        let r = bs.len();
        if bs[0] != as_[0] || bs[1..r - 1] != as_[1..r - 1] {
            return Err(dim_err(format!(
                "batched_outer leading/middle extents differ: {:?} vs {:?}",
                bs, as_
            )));
        }
        let n = bs[0];
        let middle: usize = numel_of(&bs[1..r - 1]);
        let (ni, nj) = (bs[r - 1], as_[r - 1]);
        let mut out = vec![T::zero(); n * ni * nj];
        for s in 0..n {
            let block = &mut out[s * ni * nj..(s + 1) * ni * nj];
            for m in 0..middle {
                let off = s * middle + m;
                let bv = &b_grads.data[off * ni..(off + 1) * ni];
                let av = &acts.data[off * nj..(off + 1) * nj];
                for (i, &bi) in bv.iter().enumerate() {
                    if bi == T::zero() {
                        continue;
                    }
                    let dst = &mut block[i * nj..(i + 1) * nj];
                    for (d, &aj) in dst.iter_mut().zip(av) {
                        *d += bi * aj;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![n, ni, nj], out))
    }

    /// i.i.d. N(0, std^2) samples. `std = 0` yields exact zeros and draws
    /// nothing from `rng`.
    pub fn gaussian(shape: impl Into<Vec<usize>>, std: f64, rng: &mut RngStream) -> Result<Tensor<T>> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(param_err(format!("gaussian std must be finite and >= 0, got {std}")));
        }
        let shape = shape.into();
        if std == 0.0 {
            return Ok(Tensor::zeros(shape));
        }
        let mut buf = vec![0.0f64; numel_of(&shape)];
        rng.fill_normal(&mut buf, std);
        Ok(Tensor::from_parts(shape, buf.into_iter().map(T::of).collect()))
    }

    /// Sum of squared elements, accumulated in `f64`.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| {
            let x = v.as_f64();
            acc + x * x
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    fn zip_with(&self, other: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(dim_err(format!("{op} of {:?} and {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err(format!("add_assign of {:?} and {:?}", self.shape, other.shape)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> T {
        T::of(self.data.iter().fold(0.0, |acc, v| acc + v.as_f64()))
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        T::of(self.data.iter().fold(0.0, |acc, v| acc + v.as_f64()) / self.data.len() as f64)
    }

    /// Sum over the leading dimension: `[n, rest..] -> [rest..]`.
    pub fn sum_leading(&self) -> Result<Tensor<T>> {
        if self.shape.is_empty() {
            return Err(dim_err("sum_leading on a scalar"));
        }
        let inner = numel_of(&self.shape[1..]);
        let mut acc = vec![0.0f64; inner];
        for row in self.data.chunks(inner.max(1)).take(self.shape[0]) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.as_f64();
            }
        }
        Ok(Tensor::from_parts(self.shape[1..].to_vec(), acc.into_iter().map(T::of).collect()))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        if numel_of(&shape) != self.numel() {
            return Err(dim_err(format!(
                "cannot reshape {:?} ({} elements) into {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// The `index`-th slab along the leading dimension.
    pub fn slice_leading(&self, index: usize) -> Result<Tensor<T>> {
        let lead = *self.shape.first().ok_or_else(|| dim_err("slice_leading on a scalar"))?;
        if index >= lead {
            return Err(dim_err(format!("index {index} out of range for leading extent {lead}")));
        }
        let inner = numel_of(&self.shape[1..]);
        Ok(Tensor::from_parts(
            self.shape[1..].to_vec(),
            self.data[index * inner..(index + 1) * inner].to_vec(),
        ))
    }

    /// Rows `indices` of the leading dimension, kept as a batch.
    pub fn select_leading(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let lead = *self.shape.first().ok_or_else(|| dim_err("select_leading on a scalar"))?;
        let inner = numel_of(&self.shape[1..]);
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= lead {
                return Err(dim_err(format!("index {i} out of range for leading extent {lead}")));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| dim_err("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(dim_err(format!("stack of {:?} and {:?}", first.shape, t.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Swaps the two trailing-most groups: `[n, a, b] -> [n, b, a]`.
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        if self.ndim() < 2 {
            return Err(dim_err(format!("transpose_last2 on {:?}", self.shape)));
        }
        let r = self.ndim();
        let (a, b) = (self.shape[r - 2], self.shape[r - 1]);
        let outer = numel_of(&self.shape[..r - 2]);
        let mut data = vec![T::zero(); self.numel()];
        for o in 0..outer {
            let src = &self.data[o * a * b..(o + 1) * a * b];
            let dst = &mut data[o * a * b..(o + 1) * a * b];
            for i in 0..a {
                for j in 0..b {
                    dst[j * a + i] = src[i * b + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Maximum absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(dim_err(format!("compare {:?} with {:?}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }
}
