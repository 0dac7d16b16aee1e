//! Raw numeric loops shared by tape forward passes and their adjoints.
//! All buffers are flat row-major slices; shape bookkeeping stays in the tape.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// C = op(A) * op(B) where `ta`/`tb` transpose the logical operands.
/// Logical dimensions after transposition: A is m*k, B is k*n, C is m*n.
/// `accumulate` adds into `out` instead of overwriting.
pub fn matmul<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    assert_eq!(out.len(), m * n);
    if !accumulate {
        out.fill(T::zero());
    }
    // index helpers over the *stored* layouts
    let a_at = |i: usize, j: usize| if ta { a[j * m + i] } else { a[i * k + j] };
    let b_at = |i: usize, j: usize| if tb { b[j * k + i] } else { b[i * n + j] };
    for i in 0..m {
        for p in 0..k {
            let av = a_at(i, p);
            if av == T::zero() {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b_at(p, j);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn infer(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<ConvDims> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        let (batch, in_ch, in_h, in_w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (out_ch, w_in_ch, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if w_in_ch != in_ch || kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if kh > in_h + 2 * pad || kh > in_w + 2 * pad {
            return Err(Error::Config(format!(
                "conv2d kernel {kh} exceeds padded input {}x{}",
                in_h + 2 * pad,
                in_w + 2 * pad
            )));
        }
        let num_h = in_h + 2 * pad - kh;
        let num_w = in_w + 2 * pad - kh;
        if !num_h.is_multiple_of(stride) || !num_w.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "conv2d output size is not integral: input {in_h}x{in_w}, kernel {kh}, stride {stride}, pad {pad}"
            )));
        }
        Ok(ConvDims {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel: kh,
            stride,
            pad,
            out_h: num_h / stride + 1,
            out_w: num_w / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_ch, self.in_h, self.in_w]
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_ch * self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.batch * self.in_ch * self.in_h * self.in_w
    }
}

/// Cross-correlation (no kernel flip), NCHW layout.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], out: &mut [T], d: &ConvDims) {
    out.fill(T::zero());
    let k = d.kernel;
    for b in 0..d.batch {
        for f in 0..d.out_ch {
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let mut acc = T::zero();
                    for c in 0..d.in_ch {
                        for ky in 0..k {
                            let iy = oy * d.stride + ky;
                            if iy < d.pad || iy >= d.in_h + d.pad {
                                continue;
                            }
                            let iy = iy - d.pad;
                            for kx in 0..k {
                                let ix = ox * d.stride + kx;
                                if ix < d.pad || ix >= d.in_w + d.pad {
                                    continue;
                                }
                                let ix = ix - d.pad;
                                let xv = x[((b * d.in_ch + c) * d.in_h + iy) * d.in_w + ix];
                                let wv = w[((f * d.in_ch + c) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * d.out_ch + f) * d.out_h + oy) * d.out_w + ox] = acc;
                }
            }
        }
    }
}

/// Adjoint of [`conv2d_forward`] in the input slot: scatters `dy` back
/// through the kernel. Adds into `dx` when `accumulate` is set.
pub fn conv2d_input_grad<T: Real>(dy: &[T], w: &[T], dx: &mut [T], d: &ConvDims, accumulate: bool) {
    if !accumulate {
        dx.fill(T::zero());
    }
    let k = d.kernel;
    for b in 0..d.batch {
        for f in 0..d.out_ch {
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let g = dy[((b * d.out_ch + f) * d.out_h + oy) * d.out_w + ox];
                    if g == T::zero() {
                        continue;
                    }
                    for c in 0..d.in_ch {
                        for ky in 0..k {
                            let iy = oy * d.stride + ky;
                            if iy < d.pad || iy >= d.in_h + d.pad {
                                continue;
                            }
                            let iy = iy - d.pad;
                            for kx in 0..k {
                                let ix = ox * d.stride + kx;
                                if ix < d.pad || ix >= d.in_w + d.pad {
                                    continue;
                                }
                                let ix = ix - d.pad;
                                let wv = w[((f * d.in_ch + c) * k + ky) * k + kx];
                                dx[((b * d.in_ch + c) * d.in_h + iy) * d.in_w + ix] += g * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv2d_forward`] in the weight slot.
pub fn conv2d_weight_grad<T: Real>(
    x: &[T],
    dy: &[T],
    dw: &mut [T],
    d: &ConvDims,
    accumulate: bool,
) {
    if !accumulate {
        dw.fill(T::zero());
    }
    let k = d.kernel;
    for b in 0..d.batch {
        for f in 0..d.out_ch {
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let g = dy[((b * d.out_ch + f) * d.out_h + oy) * d.out_w + ox];
                    if g == T::zero() {
                        continue;
                    }
                    for c in 0..d.in_ch {
                        for ky in 0..k {
                            let iy = oy * d.stride + ky;
                            if iy < d.pad || iy >= d.in_h + d.pad {
                                continue;
                            }
                            let iy = iy - d.pad;
                            for kx in 0..k {
                                let ix = ox * d.stride + kx;
                                if ix < d.pad || ix >= d.in_w + d.pad {
                                    continue;
                                }
                                let ix = ix - d.pad;
                                let xv = x[((b * d.in_ch + c) * d.in_h + iy) * d.in_w + ix];
                                dw[((f * d.in_ch + c) * k + ky) * k + kx] += g * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 average pooling with stride 2. Spatial dims must be even.
pub fn avg_pool2<T: Real>(x: &[T], out: &mut [T], batch: usize, ch: usize, h: usize, w: usize) {
    debug_assert!(h.is_multiple_of(2) && w.is_multiple_of(2));
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    for bc in 0..batch * ch {
        let xin = &x[bc * h * w..(bc + 1) * h * w];
        let xout = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (iy, ix) = (oy * 2, ox * 2);
                xout[oy * ow + ox] = (xin[iy * w + ix]
                    + xin[iy * w + ix + 1]
                    + xin[(iy + 1) * w + ix]
                    + xin[(iy + 1) * w + ix + 1])
                    * quarter;
            }
        }
    }
}

/// Nearest-neighbor x2 upsampling.
pub fn upsample_nearest2<T: Real>(
    x: &[T],
    out: &mut [T],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
) {
    let (oh, ow) = (h * 2, w * 2);
    for bc in 0..batch * ch {
        let xin = &x[bc * h * w..(bc + 1) * h * w];
        let xout = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                xout[oy * ow + ox] = xin[(oy / 2) * w + ox / 2];
            }
        }
    }
}
