//! im2col unfolding for 2-D convolution (groups = 1, dilation = 1).
//!
//! Column layout is `[batch, out_positions, in_channels * kh * kw]` with the
//! patch index ordered `(channel, kernel_row, kernel_col)`, which matches the
//! row-major flattening of a `[out, in, kh, kw]` weight.

use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Output extent along one axis, or an error if the kernel does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return Err(dim_err(format!(
            "kernel {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(input_shape: &[usize], kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2]) -> Result<Self> {
        let &[batch, channels, height, width] = input_shape else {
            return Err(dim_err(format!("conv2d expects [b, c, h, w] input, got {input_shape:?}")));
        };
        let out_h = conv_output_size(height, kernel[0], stride[0], padding[0])?;
        let out_w = conv_output_size(width, kernel[1], stride[1], padding[1])?;
        Ok(Self { batch, channels, height, width, kernel, stride, padding, out_h, out_w })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel[0] * self.kernel[1]
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate read by output position `(oh, ow)` at kernel offset
    /// `(kh, kw)`, or `None` when it falls in the zero padding.
    fn source(&self, oh: usize, ow: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let y = (oh * self.stride[0] + kh).checked_sub(self.padding[0])?;
        let x = (ow * self.stride[1] + kw).checked_sub(self.padding[1])?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

pub fn im2col<T: Scalar>(input: &Tensor<T>, kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2]) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), kernel, stride, padding)?;
    let (k, l) = (g.patch_len(), g.positions());
    let src = input.data();
    let mut cols = vec![T::zero(); g.batch * l * k];
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let row = &mut cols[(n * l + oh * g.out_w + ow) * k..][..k];
                let mut idx = 0;
                for c in 0..g.channels {
                    let plane = (n * g.channels + c) * g.height * g.width;
                    for kh in 0..kernel[0] {
                        for kw in 0..kernel[1] {
                            if let Some((y, x)) = g.source(oh, ow, kh, kw) {
                                row[idx] = src[plane + y * g.width + x];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, l, k], cols))
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an input-shaped
/// tensor.
pub fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    input_shape: &[usize],
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
) -> Result<Tensor<T>> {
    let g = Geometry::new(input_shape, kernel, stride, padding)?;
    let (k, l) = (g.patch_len(), g.positions());
    if cols.shape() != [g.batch, l, k] {
        return Err(dim_err(format!(
            "col2im expects columns {:?}, got {:?}",
            [g.batch, l, k],
            cols.shape()
        )));
    }
    let src = cols.data();
    let mut out = vec![T::zero(); input_shape.iter().product()];
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let row = &src[(n * l + oh * g.out_w + ow) * k..][..k];
                let mut idx = 0;
                for c in 0..g.channels {
                    let plane = (n * g.channels + c) * g.height * g.width;
                    for kh in 0..kernel[0] {
                        for kw in 0..kernel[1] {
                            if let Some((y, x)) = g.source(oh, ow, kh, kw) {
                                out[plane + y * g.width + x] += row[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), out))
}
