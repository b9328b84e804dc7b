//! im2col-based 2-D convolution kernels.
//!
//! Layouts: activations are NCHW, conv kernels are `[out, in, k, k]`.
//! A transposed convolution with kernel `[in, out, k, k]` is computed as the
//! input-gradient of the matching forward convolution, so the two are exact
//! adjoints of one another.

use crate::element::{gemm, Element};
use crate::error::{Result, TensorError};

/// Geometry of a forward convolution `[n, c_in, h, w] -> [n, c_out, oh, ow]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry for `conv2d(input, kernel)`.
    pub fn conv2d(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c_in, h, w) = dims4("conv2d", input)?;
        let (c_out, kc, k, k2) = dims4("conv2d", kernel)?;
        if kc != c_in || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                detail: format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            });
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Geometry of the forward convolution whose adjoint is
    /// `conv_transpose2d(input, kernel)`.
    ///
    /// The returned geometry's *output* is the transposed op's input.
    pub fn conv_transpose2d(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = dims4("conv_transpose2d", input)?;
        let (kc, c_out, k, k2) = dims4("conv_transpose2d", kernel)?;
        if kc != c || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv_transpose2d",
                detail: "stride must be positive".into(),
            });
        }
        let extent = |d: usize| (d as isize - 1) * stride as isize - 2 * pad as isize + k as isize;
        let (oh, ow) = (extent(h), extent(w));
        if oh <= 0 || ow <= 0 {
            return Err(TensorError::InvalidShape {
                op: "conv_transpose2d",
                detail: format!("non-positive output extent {oh}x{ow}"),
            });
        }
        Ok(Self {
            n,
            c_in: c_out,
            h: oh as usize,
            w: ow as usize,
            c_out: c,
            k,
            stride,
            pad,
            oh: h,
            ow: w,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_in, self.h, self.w]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(TensorError::InvalidShape {
            op,
            detail: format!("expected rank 4, got {s:?}"),
        }),
    }
}

/// Unfolds the input into rows `[n·oh·ow, c_in·k·k]`.
fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.n * g.positions() * patch];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((n * g.oh + oy) * g.ow + ox) * patch;
                for c in 0..g.c_in {
                    let plane = &x[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for ki in 0..g.k {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        let dst = &mut cols[row + (c * g.k + ki) * g.k..][..g.k];
                        for (kj, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatters rows back onto an input-shaped buffer.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut x = vec![T::zero(); g.n * g.c_in * g.h * g.w];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((n * g.oh + oy) * g.ow + ox) * patch;
                for c in 0..g.c_in {
                    let base = (n * g.c_in + c) * g.h * g.w;
                    for ki in 0..g.k {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &cols[row + (c * g.k + ki) * g.k..][..g.k];
                        let dst = &mut x[base + iy as usize * g.w..][..g.w];
                        for (kj, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] = dst[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, ch, p]` -> `[n·p, ch]`
fn nchw_to_rows<T: Element>(x: &[T], n: usize, ch: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for c in 0..ch {
            let src = &x[(b * ch + c) * p..][..p];
            for (i, &v) in src.iter().enumerate() {
                out[(b * p + i) * ch + c] = v;
            }
        }
    }
    out
}

/// `[n·p, ch]` -> `[n, ch, p]`
fn rows_to_nchw<T: Element>(rows: &[T], n: usize, ch: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows.len()];
    for b in 0..n {
        for i in 0..p {
            let src = &rows[(b * p + i) * ch..][..ch];
            for (c, &v) in src.iter().enumerate() {
                out[(b * ch + c) * p + i] = v;
            }
        }
    }
    out
}

/// Forward cross-correlation; `kernel` is `[c_out, c_in, k, k]`.
pub fn conv2d_forward<T: Element>(x: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    let np = g.n * g.positions();
    let mut rows = vec![T::zero(); np * g.c_out];
    gemm(
        np,
        g.patch(),
        g.c_out,
        &cols,
        false,
        kernel,
        true,
        &mut rows,
        false,
    );
    rows_to_nchw(&rows, g.n, g.c_out, g.positions())
}

/// Gradient of `conv2d` with respect to its input; this is also the forward
/// pass of the transposed convolution.
pub fn conv2d_input_grad<T: Element>(gy: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.n * g.positions();
    let rows = nchw_to_rows(gy, g.n, g.c_out, g.positions());
    let mut dcols = vec![T::zero(); np * g.patch()];
    gemm(
        np,
        g.c_out,
        g.patch(),
        &rows,
        false,
        kernel,
        false,
        &mut dcols,
        false,
    );
    col2im(&dcols, g)
}

/// Gradient of `conv2d` with respect to its kernel, given the conv input `x`
/// and output gradient `gy`.
pub fn conv2d_kernel_grad<T: Element>(x: &[T], gy: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.n * g.positions();
    let cols = im2col(x, g);
    let rows = nchw_to_rows(gy, g.n, g.c_out, g.positions());
    let mut dk = vec![T::zero(); g.c_out * g.patch()];
    gemm(
        g.c_out,
        np,
        g.patch(),
        &rows,
        true,
        &cols,
        false,
        &mut dk,
        false,
    );
    dk
}
