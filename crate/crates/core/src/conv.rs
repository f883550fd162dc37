//! 2-D convolution with zero padding.
//!
//! The slice kernels work on one sample (`[C, H, W]`, row-major) and are what
//! the layer code calls in its per-sample loops. [`conv2d`] and
//! [`conv2d_grad`] wrap them for batched `[B, C, H, W]` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 1,
            padding: 0,
        }
    }
}

/// Fully resolved sizes of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        cfg: Conv2dConfig,
        in_h: usize,
        in_w: usize,
    ) -> Result<Self> {
        if kernel == 0 || cfg.stride == 0 {
            return Err(Error::config("conv kernel and stride must be positive"));
        }
        let (ph, pw) = (in_h + 2 * cfg.padding, in_w + 2 * cfg.padding);
        if ph < kernel || pw < kernel {
            return Err(Error::shape(format!(
                "conv kernel {kernel} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride: cfg.stride,
            padding: cfg.padding,
            in_h,
            in_w,
            out_h: (ph - kernel) / cfg.stride + 1,
            out_w: (pw - kernel) / cfg.stride + 1,
        })
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Output positions `o` along one axis whose input coordinate
    /// `o * stride + k - padding` falls inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        if extent + p <= k {
            return (0, 0);
        }
        let hi = ((extent - 1 + p - k) / s + 1).min(out_extent);
        (lo.min(hi), hi)
    }
}

/// `out = conv(x, w) + b` for a single sample.
pub fn forward_single<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let (hw_in, hw_out, kk) = (g.in_h * g.in_w, g.out_h * g.out_w, g.kernel * g.kernel);
    for co in 0..g.out_channels {
        let out_c = &mut out[co * hw_out..(co + 1) * hw_out];
        out_c.fill(b[co]);
        for ci in 0..g.in_channels {
            let x_c = &x[ci * hw_in..(ci + 1) * hw_in];
            let w_base = (co * g.in_channels + ci) * kk;
            for ki in 0..g.kernel {
                let (oi_lo, oi_hi) = g.valid_range(ki, g.in_h, g.out_h);
                for kj in 0..g.kernel {
                    let wv = w[w_base + ki * g.kernel + kj];
                    let (oj_lo, oj_hi) = g.valid_range(kj, g.in_w, g.out_w);
                    for oi in oi_lo..oi_hi {
                        let ii = oi * g.stride + ki - g.padding;
                        let x_row = &x_c[ii * g.in_w..(ii + 1) * g.in_w];
                        let o_row = &mut out_c[oi * g.out_w..(oi + 1) * g.out_w];
                        if g.stride == 1 {
                            let off = oj_lo + kj - g.padding;
                            let n = oj_hi - oj_lo;
                            for (o, &xv) in o_row[oj_lo..oj_hi].iter_mut().zip(&x_row[off..off + n]) {
                                *o += wv * xv;
                            }
                        } else {
                            for oj in oj_lo..oj_hi {
                                o_row[oj] += wv * x_row[oj * g.stride + kj - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients, and the input gradient when
/// `gx` is given, for a single sample. All outputs are added into.
pub fn backward_single<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    gout: &[T],
    gw: &mut [T],
    gb: &mut [T],
    mut gx: Option<&mut [T]>,
) {
    let (hw_in, hw_out, kk) = (g.in_h * g.in_w, g.out_h * g.out_w, g.kernel * g.kernel);
    for co in 0..g.out_channels {
        let go_c = &gout[co * hw_out..(co + 1) * hw_out];
        gb[co] += go_c.iter().copied().sum::<T>();
        for ci in 0..g.in_channels {
            let x_c = &x[ci * hw_in..(ci + 1) * hw_in];
            let w_base = (co * g.in_channels + ci) * kk;
            for ki in 0..g.kernel {
                let (oi_lo, oi_hi) = g.valid_range(ki, g.in_h, g.out_h);
                for kj in 0..g.kernel {
                    let (oj_lo, oj_hi) = g.valid_range(kj, g.in_w, g.out_w);
                    let wv = w[w_base + ki * g.kernel + kj];
                    let mut acc = T::zero();
                    for oi in oi_lo..oi_hi {
                        let ii = oi * g.stride + ki - g.padding;
                        let go_row = &go_c[oi * g.out_w..(oi + 1) * g.out_w];
                        let x_row = &x_c[ii * g.in_w..(ii + 1) * g.in_w];
                        if g.stride == 1 {
                            let off = oj_lo + kj - g.padding;
                            let n = oj_hi - oj_lo;
                            let xs = &x_row[off..off + n];
                            let gs = &go_row[oj_lo..oj_hi];
                            acc += xs.iter().zip(gs).map(|(&a, &b)| a * b).sum::<T>();
                            if let Some(gx) = gx.as_deref_mut() {
                                let gx_row = &mut gx[ci * hw_in + ii * g.in_w..][off..off + n];
                                for (d, &gv) in gx_row.iter_mut().zip(gs) {
                                    *d += wv * gv;
                                }
                            }
                        } else {
                            for (oj, &go) in go_row.iter().enumerate().take(oj_hi).skip(oj_lo) {
                                let jj = oj * g.stride + kj - g.padding;
                                acc += go * x_row[jj];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[ci * hw_in + ii * g.in_w + jj] += wv * go;
                                }
                            }
                        }
                    }
                    gw[w_base + ki * g.kernel + kj] += acc;
                }
            }
        }
    }
}

fn batch_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    cfg: Conv2dConfig,
) -> Result<(usize, ConvGeometry)> {
    let (x, w) = (input.dims(), weight.dims());
    if x.len() != 4 || w.len() != 4 || w[2] != w[3] || x[1] != w[1] {
        return Err(Error::shape(format!(
            "conv2d expects input [B,C,H,W] and weight [O,C,K,K]; got {x:?} and {w:?}"
        )));
    }
    Ok((x[0], ConvGeometry::new(w[1], w[0], w[2], cfg, x[2], x[3])?))
}

/// Batched forward convolution: `[B, C, H, W] -> [B, O, H', W']`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    cfg: Conv2dConfig,
) -> Result<Tensor<T>> {
    let (batch, g) = batch_geometry(input, weight, cfg)?;
    if bias.dims() != [g.out_channels] {
        return Err(Error::shape(format!(
            "conv2d bias {:?} does not match {} output channels",
            bias.dims(),
            g.out_channels
        )));
    }
    let mut out = vec![T::zero(); batch * g.output_len()];
    for (xb, ob) in input
        .data()
        .chunks_exact(g.input_len())
        .zip(out.chunks_exact_mut(g.output_len()))
    {
        forward_single(&g, xb, weight.data(), bias.data(), ob);
    }
    let shape = Shape::new(vec![batch, g.out_channels, g.out_h, g.out_w])?;
    Tensor::new(shape, out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of `sum(grad_out * conv2d(input, weight, bias))` with respect
/// to input, weight, and bias (summed over the batch).
pub fn conv2d_grad<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    cfg: Conv2dConfig,
) -> Result<Conv2dGrads<T>> {
    let (batch, g) = batch_geometry(input, weight, cfg)?;
    if grad_out.dims() != [batch, g.out_channels, g.out_h, g.out_w] {
        return Err(Error::shape(format!(
            "conv2d_grad: grad_out {:?} does not match output geometry",
            grad_out.dims()
        )));
    }
    let mut gx = vec![T::zero(); input.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); g.out_channels];
    for ((xb, gob), gxb) in input
        .data()
        .chunks_exact(g.input_len())
        .zip(grad_out.data().chunks_exact(g.output_len()))
        .zip(gx.chunks_exact_mut(g.input_len()))
    {
        backward_single(&g, xb, weight.data(), gob, &mut gw, &mut gb, Some(gxb));
    }
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape().clone(), gx)?,
        weight: Tensor::new(weight.shape().clone(), gw)?,
        bias: Tensor::from_vec(&[g.out_channels], gb)?,
    })
}
