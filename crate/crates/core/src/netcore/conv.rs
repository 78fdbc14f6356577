//! Strided, padded 2-D convolution (cross-correlation) over CHW tensors.
//!
//! Kernels are laid out as `[out_channels, in_channels, kernel_h, kernel_w]`.
//! Output position `(oy, ox)` reads input row `oy * stride_h - pad_top + ky`
//! and column `ox * stride_w - pad_left + kx`; taps that fall in the padding
//! contribute zero.
//!
//! Padding conventions:
//! - `valid`: no padding.
//! - `same`: output extent `ceil(input / stride)` per axis. The total padding
//!   `max((out - 1) * stride + kernel - input, 0)` is split with
//!   `floor(total / 2)` before and the remainder after, so an odd leftover
//!   goes to the bottom/right (the TensorFlow convention).
//! - `explicit`: caller-chosen amounts per side.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
    Explicit {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
}

/// Shape contract of one convolutional layer: input CHW, output channel
/// count, kernel extent, stride, and padding scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel_height: usize,
    pub kernel_width: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub padding: Padding,
}

/// Per-side padding amounts resolved from a [`Padding`] scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pads {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

fn same_pads(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let needed = (out - 1) * stride + kernel;
    let total = needed.saturating_sub(input);
    let before = total / 2;
    (before, total - before)
}

impl ConvGeometry {
    /// Square-kernel, equal-stride convenience constructor.
    pub fn square(
        in_channels: usize,
        in_size: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        Self {
            in_channels,
            in_height: in_size,
            in_width: in_size,
            out_channels,
            kernel_height: kernel,
            kernel_width: kernel,
            stride_h: stride,
            stride_w: stride,
            padding,
        }
    }

    pub fn pads(&self) -> Pads {
        match self.padding {
            Padding::Valid => Pads {
                top: 0,
                bottom: 0,
                left: 0,
                right: 0,
            },
            Padding::Same => {
                let (top, bottom) =
                    same_pads(self.in_height, self.kernel_height, self.stride_h.max(1));
                let (left, right) =
                    same_pads(self.in_width, self.kernel_width, self.stride_w.max(1));
                Pads {
                    top,
                    bottom,
                    left,
                    right,
                }
            }
            Padding::Explicit {
                top,
                bottom,
                left,
                right,
            } => Pads {
                top,
                bottom,
                left,
                right,
            },
        }
    }

    fn out_extent(input: usize, before: usize, after: usize, kernel: usize, stride: usize) -> usize {
        let padded = input + before + after;
        if padded < kernel || stride == 0 {
            0
        } else {
            (padded - kernel) / stride + 1
        }
    }

    pub fn out_height(&self) -> usize {
        let p = self.pads();
        Self::out_extent(self.in_height, p.top, p.bottom, self.kernel_height, self.stride_h)
    }

    pub fn out_width(&self) -> usize {
        let p = self.pads();
        Self::out_extent(self.in_width, p.left, p.right, self.kernel_width, self.stride_w)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.in_height, self.in_width]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_height(), self.out_width()]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_height,
            self.kernel_width,
        ]
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_height * self.kernel_width
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.in_height,
            self.in_width,
            self.out_channels,
            self.kernel_height,
            self.kernel_width,
        ];
        if dims.contains(&0) {
            return Err(Error::input(format!(
                "conv geometry has a zero dimension: {self:?}"
            )));
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::input("conv stride must be >= 1"));
        }
        if self.out_height() == 0 || self.out_width() == 0 {
            return Err(Error::input(format!(
                "conv output would be empty ({}x{}) for {self:?}",
                self.out_height(),
                self.out_width()
            )));
        }
        Ok(())
    }
}

/// Precomputed index bookkeeping shared by the three kernels below.
struct Plan {
    m: usize,
    n: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
    pt: usize,
    pl: usize,
}

impl Plan {
    fn new(g: &ConvGeometry) -> Self {
        let p = g.pads();
        Self {
            m: g.in_channels,
            n: g.out_channels,
            h: g.in_height,
            w: g.in_width,
            kh: g.kernel_height,
            kw: g.kernel_width,
            sh: g.stride_h,
            sw: g.stride_w,
            oh: g.out_height(),
            ow: g.out_width(),
            pt: p.top,
            pl: p.left,
        }
    }

    /// Output columns `ox` whose tap `kx` lands inside the input, with the
    /// matching first input column.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize, usize) {
        // ix = ox * sw + kx - pl must lie in [0, w)
        let lo = if kx >= self.pl {
            0
        } else {
            (self.pl - kx).div_ceil(self.sw)
        };
        let hi = if self.w + self.pl > kx {
            ((self.w + self.pl - kx - 1) / self.sw + 1).min(self.ow)
        } else {
            0
        };
        let ix0 = (lo * self.sw + kx).wrapping_sub(self.pl);
        (lo, hi.max(lo), ix0)
    }

    #[inline]
    fn row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.sh + ky).checked_sub(self.pt)?;
        (iy < self.h).then_some(iy)
    }
}

/// `out = conv(kernel, input)`; `out` is overwritten.
pub(crate) fn conv_forward(kernel: &[f64], g: &ConvGeometry, input: &[f64], out: &mut [f64]) {
    let p = Plan::new(g);
    debug_assert_eq!(input.len(), p.m * p.h * p.w);
    debug_assert_eq!(out.len(), p.n * p.oh * p.ow);
    out.fill(0.0);
    for n in 0..p.n {
        let out_c = &mut out[n * p.oh * p.ow..(n + 1) * p.oh * p.ow];
        for m in 0..p.m {
            let in_c = &input[m * p.h * p.w..(m + 1) * p.h * p.w];
            for ky in 0..p.kh {
                for kx in 0..p.kw {
                    let k = kernel[((n * p.m + m) * p.kh + ky) * p.kw + kx];
                    if k == 0.0 {
                        continue;
                    }
                    let (lo, hi, ix0) = p.col_range(kx);
                    for oy in 0..p.oh {
                        let Some(iy) = p.row(oy, ky) else { continue };
                        let in_row = &in_c[iy * p.w..(iy + 1) * p.w];
                        let out_row = &mut out_c[oy * p.ow..(oy + 1) * p.ow];
                        for (j, ox) in (lo..hi).enumerate() {
                            out_row[ox] += k * in_row[ix0 + j * p.sw];
                        }
                    }
                }
            }
        }
    }
}

/// `out = convᵀ(kernel, v)`, the exact adjoint of [`conv_forward`].
pub(crate) fn conv_transpose(kernel: &[f64], g: &ConvGeometry, v: &[f64], out: &mut [f64]) {
    let p = Plan::new(g);
    debug_assert_eq!(v.len(), p.n * p.oh * p.ow);
    debug_assert_eq!(out.len(), p.m * p.h * p.w);
    out.fill(0.0);
    for n in 0..p.n {
        let v_c = &v[n * p.oh * p.ow..(n + 1) * p.oh * p.ow];
        for m in 0..p.m {
            let out_c = &mut out[m * p.h * p.w..(m + 1) * p.h * p.w];
            for ky in 0..p.kh {
                for kx in 0..p.kw {
                    let k = kernel[((n * p.m + m) * p.kh + ky) * p.kw + kx];
                    if k == 0.0 {
                        continue;
                    }
                    let (lo, hi, ix0) = p.col_range(kx);
                    for oy in 0..p.oh {
                        let Some(iy) = p.row(oy, ky) else { continue };
                        let v_row = &v_c[oy * p.ow..(oy + 1) * p.ow];
                        let out_row = &mut out_c[iy * p.w..(iy + 1) * p.w];
                        for (j, ox) in (lo..hi).enumerate() {
                            out_row[ix0 + j * p.sw] += k * v_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `grad += ∂⟨v, conv(K, input)⟩/∂K`.
pub(crate) fn conv_kernel_grad_acc(g: &ConvGeometry, input: &[f64], v: &[f64], grad: &mut [f64]) {
    let p = Plan::new(g);
    for n in 0..p.n {
        let v_c = &v[n * p.oh * p.ow..(n + 1) * p.oh * p.ow];
        for m in 0..p.m {
            let in_c = &input[m * p.h * p.w..(m + 1) * p.h * p.w];
            for ky in 0..p.kh {
                for kx in 0..p.kw {
                    let (lo, hi, ix0) = p.col_range(kx);
                    let mut acc = 0.0;
                    for oy in 0..p.oh {
                        let Some(iy) = p.row(oy, ky) else { continue };
                        let in_row = &in_c[iy * p.w..(iy + 1) * p.w];
                        let v_row = &v_c[oy * p.ow..(oy + 1) * p.ow];
                        for (j, ox) in (lo..hi).enumerate() {
                            acc += v_row[ox] * in_row[ix0 + j * p.sw];
                        }
                    }
                    grad[((n * p.m + m) * p.kh + ky) * p.kw + kx] += acc;
                }
            }
        }
    }
}
