//! Forward/backward kernels on raw row-major buffers.
//!
//! The graph in the parent module owns shapes and bookkeeping; these functions
//! only do arithmetic.

use crate::error::{Error, Result};
use crate::scalar::{gemm, Op, Scalar};

/// Geometry of one 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let padded_h = in_h + 2 * padding;
        let padded_w = in_w + 2 * padding;
        if kernel_h == 0 || kernel_w == 0 || kernel_h > padded_h || kernel_w > padded_w {
            return Err(Error::Config(format!(
                "conv2d kernel {kernel_h}x{kernel_w} does not fit padded input {padded_h}x{padded_w}: non-positive output extent"
            )));
        }
        Ok(ConvGeom {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (padded_h - kernel_h) / stride + 1,
            out_w: (padded_w - kernel_w) / stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix: `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// `out[B, Dout] = input[B, Din] * weight[Din, Dout] + bias`.
pub fn linear_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    batch: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * d_out);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm(Op::N, Op::N, batch, d_in, d_out, T::one(), input, weight, T::one(), &mut out);
    out
}

/// Gradients of [`linear_forward`]. `d_input` is only computed when requested.
pub fn linear_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    d_out: &[T],
    batch: usize,
    d_in: usize,
    d_outw: usize,
    want_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let d_input = want_input.then(|| {
        let mut dx = vec![T::zero(); batch * d_in];
        gemm(Op::N, Op::T, batch, d_outw, d_in, T::one(), d_out, weight, T::zero(), &mut dx);
        dx
    });
    let mut d_weight = vec![T::zero(); d_in * d_outw];
    gemm(Op::T, Op::N, d_in, batch, d_outw, T::one(), input, d_out, T::zero(), &mut d_weight);
    let mut d_bias = vec![T::zero(); d_outw];
    for row in d_out.chunks_exact(d_outw) {
        d_bias.iter_mut().zip(row).for_each(|(b, &g)| *b = *b + g);
    }
    (d_input, d_weight, d_bias)
}

/// Unfolds zero-padded patches into `[C*kh*kw, B*Ho*Wo]`.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let cols_w = g.batch * plane;
    let mut cols = vec![T::zero(); g.patch_len() * cols_w];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst_row = &mut cols[row * cols_w..(row + 1) * cols_w];
                for b in 0..g.batch {
                    let src = &input[(b * g.in_channels + c) * g.in_h * g.in_w..];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let cols_w = g.batch * plane;
    let mut out = vec![T::zero(); g.batch * g.in_channels * g.in_h * g.in_w];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src_row = &cols[row * cols_w..(row + 1) * cols_w];
                for b in 0..g.batch {
                    let dst = &mut out[(b * g.in_channels + c) * g.in_h * g.in_w..];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                let d = &mut dst_row[ix as usize];
                                *d = *d + src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// im2col + gemm convolution. Returns the output and the unfolded patches,
/// which the backward pass reuses.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(input, g);
    let plane = g.out_plane();
    let cols_w = g.batch * plane;
    let mut tmp = vec![T::zero(); g.out_channels * cols_w];
    gemm(
        Op::N,
        Op::N,
        g.out_channels,
        g.patch_len(),
        cols_w,
        T::one(),
        kernel,
        &cols,
        T::zero(),
        &mut tmp,
    );
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    for k in 0..g.out_channels {
        let bk = bias.map_or(T::zero(), |b| b[k]);
        for b in 0..g.batch {
            let src = &tmp[k * cols_w + b * plane..k * cols_w + (b + 1) * plane];
            let dst = &mut out[(b * g.out_channels + k) * plane..(b * g.out_channels + k + 1) * plane];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + bk);
        }
    }
    (out, cols)
}

/// Direct-loop cross-correlation; the reference path the im2col route is
/// checked against.
pub fn conv2d_forward_direct<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_channels * g.out_plane()];
    for b in 0..g.batch {
        for k in 0..g.out_channels {
            let bk = bias.map_or(T::zero(), |bs| bs[k]);
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bk;
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel_h {
                            let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            for kj in 0..g.kernel_w {
                                let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.in_w as isize {
                                    continue;
                                }
                                let x = input[((b * g.in_channels + c) * g.in_h + iy as usize) * g.in_w
                                    + ix as usize];
                                let w = kernel[((k * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                                acc = acc + x * w;
                            }
                        }
                    }
                    out[((b * g.out_channels + k) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] given the saved patch matrix.
pub fn conv2d_backward<T: Scalar>(
    cols: &[T],
    kernel: &[T],
    d_out: &[T],
    g: &ConvGeom,
    want_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane = g.out_plane();
    let cols_w = g.batch * plane;
    // [B, K, P] -> [K, B*P]
    let mut d_tmp = vec![T::zero(); g.out_channels * cols_w];
    let mut d_bias = vec![T::zero(); g.out_channels];
    for b in 0..g.batch {
        for k in 0..g.out_channels {
            let src = &d_out[(b * g.out_channels + k) * plane..(b * g.out_channels + k + 1) * plane];
            d_tmp[k * cols_w + b * plane..k * cols_w + (b + 1) * plane].copy_from_slice(src);
            d_bias[k] = d_bias[k] + src.iter().copied().sum::<T>();
        }
    }
    let mut d_kernel = vec![T::zero(); g.out_channels * g.patch_len()];
    gemm(
        Op::N,
        Op::T,
        g.out_channels,
        cols_w,
        g.patch_len(),
        T::one(),
        &d_tmp,
        cols,
        T::zero(),
        &mut d_kernel,
    );
    let d_input = want_input.then(|| {
        let mut d_cols = vec![T::zero(); g.patch_len() * cols_w];
        gemm(
            Op::T,
            Op::N,
            g.patch_len(),
            g.out_channels,
            cols_w,
            T::one(),
            kernel,
            &d_tmp,
            T::zero(),
            &mut d_cols,
        );
        col2im(&d_cols, g)
    });
    (d_input, d_kernel, d_bias)
}

/// Per-channel layout of a `[B, C, ...]` tensor.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ChannelLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl ChannelLayout {
    pub fn count(&self) -> usize {
        self.batch * self.spatial
    }

    pub fn for_each_in_channel(&self, c: usize, mut f: impl FnMut(usize)) {
        for b in 0..self.batch {
            let base = (b * self.channels + c) * self.spatial;
            for i in base..base + self.spatial {
                f(i);
            }
        }
    }
}

/// Biased per-channel mean and variance.
pub(crate) fn channel_moments<T: Scalar>(x: &[T], l: ChannelLayout) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize(l.count()).expect("count fits scalar");
    let mut mean = vec![T::zero(); l.channels];
    let mut var = vec![T::zero(); l.channels];
    for c in 0..l.channels {
        let mut s = T::zero();
        l.for_each_in_channel(c, |i| s = s + x[i]);
        let m = s / n;
        let mut v = T::zero();
        l.for_each_in_channel(c, |i| {
            let d = x[i] - m;
            v = v + d * d;
        });
        mean[c] = m;
        var[c] = v / n;
    }
    (mean, var)
}

pub(crate) fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Row-wise softmax probabilities and mean cross-entropy.
pub(crate) fn softmax_xent_forward<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    classes: usize,
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for ((row, p), &label) in logits
        .chunks_exact(classes)
        .zip(probs.chunks_exact_mut(classes))
        .zip(labels)
    {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi = (v - max).exp();
            z = z + *pi;
        }
        p.iter_mut().for_each(|pi| *pi = *pi / z);
        total = total + (z.ln() + max - row[label]);
    }
    let n = T::from_usize(labels.len()).expect("batch fits scalar");
    (total / n, probs)
}
