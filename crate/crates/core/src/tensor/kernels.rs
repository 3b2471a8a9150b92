//! Forward and adjoint kernels for the convolution family.
//!
//! Convolutions use the cross-correlation convention (the kernel is not
//! flipped), as in most deep learning frameworks. `conv2d` weights are laid out
//! `[C_out, C_in, k, k]`; `conv_transpose2d` weights are `[C_in, C_out, k, k]`,
//! which makes `conv_transpose2d(y; W)` the exact adjoint of `conv2d(x; W)`
//! when both use the same `W`, stride and padding.

use super::Tensor;
use crate::error::{Error, Result};

/// `c = a·b + beta·c` for row-major operands, with optional transposes.
///
/// `a` is logically `m×k` and `b` is logically `k×n`. A transposed operand is
/// stored as its transpose (`k×m` for `a`, `n×k` for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside the
    // three slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one convolution: the "small" side is the conv2d output and
/// the "large" side the conv2d input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    /// Geometry of a conv2d over a `channels × height × width` input.
    pub fn forward(
        op: &'static str,
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid(format!(
                "{op}: kernel ({kernel}) and stride ({stride}) must be positive"
            )));
        }
        if height + 2 * pad < kernel {
            return Err(Error::Dimension {
                op,
                axis: "height",
                expected: kernel,
                actual: height + 2 * pad,
            });
        }
        if width + 2 * pad < kernel {
            return Err(Error::Dimension {
                op,
                axis: "width",
                expected: kernel,
                actual: width + 2 * pad,
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    /// Geometry of the conv2d whose adjoint maps a `height × width` input to
    /// the transposed-convolution output.
    pub fn transposed(
        op: &'static str,
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid(format!(
                "{op}: kernel ({kernel}) and stride ({stride}) must be positive"
            )));
        }
        let big = |n: usize, axis: &'static str| -> Result<usize> {
            let full = (n - 1) * stride + kernel;
            if full <= 2 * pad {
                return Err(Error::Dimension {
                    op,
                    axis,
                    expected: 2 * pad + 1,
                    actual: full,
                });
            }
            Ok(full - 2 * pad)
        };
        let big_h = big(height, "height")?;
        let big_w = big(width, "width")?;
        Ok(Self {
            channels,
            height: big_h,
            width: big_w,
            kernel,
            stride,
            pad,
            out_height: height,
            out_width: width,
        })
    }

    fn cols_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols_len(&self) -> usize {
        self.out_height * self.out_width
    }

    /// For kernel offset `ki` returns the range of output rows whose input row
    /// `o·stride + ki − pad` lies inside `0..extent`.
    fn valid_range(&self, ki: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        // o·s + ki ≥ pad  and  o·s + ki − pad < extent
        let lo = if ki >= self.pad {
            0
        } else {
            (self.pad - ki).div_ceil(self.stride)
        };
        let limit = extent + self.pad; // o·s + ki < limit
        let hi = if limit <= ki {
            0
        } else {
            ((limit - ki).div_ceil(self.stride)).min(out_extent)
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds a `[C, H, W]` buffer into `[C·k·k, H_out·W_out]` patch columns.
pub fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let n = g.cols_len();
    let mut cols = vec![0.0; g.cols_rows() * n];
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ki, g.height, g.out_height);
            for kj in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kj, g.width, g.out_width);
                let row = ((c * k + ki) * k + kj) * n;
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - p;
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    let dst = &mut cols[row + oy * g.out_width..row + (oy + 1) * g.out_width];
                    if s == 1 {
                        let ix0 = ox_lo + kj - p;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * s + kj - p];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into `[C, H, W]`.
pub fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let n = g.cols_len();
    let mut out = vec![0.0; g.channels * g.height * g.width];
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ki, g.height, g.out_height);
            for kj in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kj, g.width, g.out_width);
                let row = ((c * k + ki) * k + kj) * n;
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - p;
                    let src = &cols[row + oy * g.out_width..row + (oy + 1) * g.out_width];
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    for ox in ox_lo..ox_hi {
                        dst[ox * s + kj - p] += src[ox];
                    }
                }
            }
        }
    }
    out
}

fn check_weight(
    op: &'static str,
    weight: &Tensor,
    in_channels: usize,
    in_axis: usize,
) -> Result<(usize, usize)> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::invalid(format!(
            "{op}: weight must be [_, _, k, k], got {ws:?}"
        )));
    }
    if ws[in_axis] != in_channels {
        return Err(Error::Dimension {
            op,
            axis: "channel",
            expected: ws[in_axis],
            actual: in_channels,
        });
    }
    Ok((ws[1 - in_axis], ws[2]))
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, out_channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != out_channels {
            return Err(Error::Dimension {
                op,
                axis: "bias",
                expected: out_channels,
                actual: b.len(),
            });
        }
    }
    Ok(())
}

fn add_bias(out: &mut [f64], bias: Option<&Tensor>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data()) {
            chunk.iter_mut().for_each(|x| *x += bv);
        }
    }
}

/// 2-D cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, k, k]` weights.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3()?;
    let (c_out, k) = check_weight("conv2d", weight, c_in, 1)?;
    check_bias("conv2d", bias, c_out)?;
    let g = ConvGeometry::forward("conv2d", c_in, h, w, k, stride, pad)?;
    let cols = im2col(input.data(), &g);
    let n = g.cols_len();
    let mut out = vec![0.0; c_out * n];
    gemm(c_out, g.cols_rows(), n, weight.data(), false, &cols, false, 0.0, &mut out);
    add_bias(&mut out, bias, n);
    Ok(Tensor::from_parts(vec![c_out, g.out_height, g.out_width], out))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, h, w) = input.dims3()?;
    let (c_out, k) = check_weight("conv2d", weight, c_in, 1)?;
    let g = ConvGeometry::forward("conv2d", c_in, h, w, k, stride, pad)?;
    let n = g.cols_len();
    let cols = im2col(input.data(), &g);
    let gy = grad_out.data();
    let mut gw = vec![0.0; c_out * g.cols_rows()];
    gemm(c_out, n, g.cols_rows(), gy, false, &cols, true, 0.0, &mut gw);
    let mut gcols = vec![0.0; g.cols_rows() * n];
    gemm(g.cols_rows(), c_out, n, weight.data(), true, gy, false, 0.0, &mut gcols);
    let gx = col2im(&gcols, &g);
    let gb = gy.chunks(n).map(|c| c.iter().sum()).collect();
    Ok((
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![c_out], gb),
    ))
}

/// Transposed convolution of `[C_in, H, W]` with `[C_in, C_out, k, k]` weights.
///
/// Output extent is `(H − 1)·stride − 2·pad + k`.
pub fn conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3()?;
    let (c_out, k) = check_weight("conv_transpose2d", weight, c_in, 0)?;
    check_bias("conv_transpose2d", bias, c_out)?;
    let g = ConvGeometry::transposed("conv_transpose2d", c_out, h, w, k, stride, pad)?;
    let n = h * w;
    let mut cols = vec![0.0; g.cols_rows() * n];
    gemm(g.cols_rows(), c_in, n, weight.data(), true, input.data(), false, 0.0, &mut cols);
    let mut out = col2im(&cols, &g);
    add_bias(&mut out, bias, g.height * g.width);
    Ok(Tensor::from_parts(vec![c_out, g.height, g.width], out))
}

/// Gradients of [`conv_transpose2d`] with respect to input, weight and bias.
pub fn conv_transpose2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, h, w) = input.dims3()?;
    let (c_out, k) = check_weight("conv_transpose2d", weight, c_in, 0)?;
    let g = ConvGeometry::transposed("conv_transpose2d", c_out, h, w, k, stride, pad)?;
    let n = h * w;
    let gcols = im2col(grad_out.data(), &g);
    let mut gx = vec![0.0; c_in * n];
    gemm(c_in, g.cols_rows(), n, weight.data(), false, &gcols, false, 0.0, &mut gx);
    let mut gw = vec![0.0; c_in * g.cols_rows()];
    gemm(c_in, n, g.cols_rows(), input.data(), false, &gcols, true, 0.0, &mut gw);
    let plane = g.height * g.width;
    let gb = grad_out.data().chunks(plane).map(|c| c.iter().sum()).collect();
    Ok((
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![c_out], gb),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation, independent of im2col.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c_in, h, wd) = x.dims3().unwrap();
        let (c_out, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; c_out * ho * wo];
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at3(ci, iy as usize, ix as usize)
                                    * w.data()[((co * c_in + ci) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        Tensor::from_parts(vec![c_out, ho, wo], out)
    }

    #[test]
    fn hand_convolution_of_ones() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 5, 7], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn output_size_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 8, 8], &mut rng);
        let w = random(&[2, 1, 4, 4], &mut rng);
        assert_eq!(conv2d(&x, &w, None, 2, 1).unwrap().shape(), &[2, 4, 4]);
        let y = random(&[1, 4, 4], &mut rng);
        let wt = random(&[1, 3, 4, 4], &mut rng);
        assert_eq!(conv_transpose2d(&y, &wt, None, 2, 1).unwrap().shape(), &[3, 8, 8]);
    }

    #[test]
    fn transposed_expands_single_pixel() {
        let x = Tensor::full(&[1, 1, 1], 2.5);
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv_transpose2d(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, k, s, p) in &[(7, 3, 1, 1), (8, 4, 2, 1), (9, 2, 3, 0), (5, 5, 1, 2), (6, 4, 1, 1)] {
            let x = random(&[3, h, h + 1], &mut rng);
            let w = random(&[2, 3, k, k], &mut rng);
            let fast = conv2d(&x, &w, None, s, p).unwrap();
            let slow = naive_conv(&x, &w, s, p);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn reports_channel_axis() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        match conv2d(&x, &w, None, 1, 0) {
            Err(Error::Dimension { axis, expected, actual, .. }) => {
                assert_eq!((axis, expected, actual), ("channel", 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        let tiny = Tensor::zeros(&[3, 2, 2]);
        assert!(matches!(
            conv2d(&tiny, &w, None, 1, 0),
            Err(Error::Dimension { axis: "height", .. })
        ));
    }
}
