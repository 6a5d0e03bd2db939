//! Real-valued 2-D convolution primitives.
//!
//! Every complex operation in the crate is assembled from these three
//! kernels: the forward convolution, its adjoint with respect to the input
//! (which doubles as the transposed convolution) and its adjoint with
//! respect to the filter. They are lowered onto GEMM through an im2col
//! buffer that is processed in bands of whole output rows, so the reduction
//! over `(in_channel, ky, kx)` always runs in the same lexicographic order.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Target number of output pixels per im2col band.
const BAND_PIXELS: usize = 2048;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Runs `f` and returns its result together with the number of
/// multiply-accumulates performed by forward and transposed convolutions on
/// this thread while it ran.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MACS.with(Cell::get);
    let out = f();
    let after = MACS.with(Cell::get);
    (out, after - before)
}

fn record_macs(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}

/// Geometry of a strided, zero-padded convolution `input -> output`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Geometry of a forward convolution of `input` (`[C, H, W]`) with
    /// `weight` (`[O, C, kh, kw]`).
    pub fn forward(op: &'static str, input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::shape(op, format!("input rank {} != 3", input.len())));
        }
        if weight.len() != 4 {
            return Err(Error::shape(op, format!("weight rank {} != 4", weight.len())));
        }
        if stride == 0 {
            return Err(Error::shape(op, "stride must be positive"));
        }
        let (c, h, w) = (input[0], input[1], input[2]);
        let (o, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c {
            return Err(Error::shape(
                op,
                format!("input channels {c} != kernel in_channels {wc}"),
            ));
        }
        if kh > h + 2 * pad {
            return Err(Error::shape(
                op,
                format!("kernel height {kh} exceeds padded input height {}", h + 2 * pad),
            ));
        }
        if kw > w + 2 * pad {
            return Err(Error::shape(
                op,
                format!("kernel width {kw} exceeds padded input width {}", w + 2 * pad),
            ));
        }
        Ok(ConvGeometry {
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: o,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
            kh,
            kw,
            stride,
            pad,
        })
    }

    /// Geometry of the convolution whose input adjoint is the transposed
    /// convolution of `input` (`[Ci, H, W]`) with `weight` (`[Ci, Co, kh, kw]`).
    /// In the returned geometry the transposed output is the "input" side.
    pub fn transposed(op: &'static str, input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::shape(op, format!("input rank {} != 3", input.len())));
        }
        if weight.len() != 4 {
            return Err(Error::shape(op, format!("weight rank {} != 4", weight.len())));
        }
        if stride == 0 {
            return Err(Error::shape(op, "stride must be positive"));
        }
        let (ci, h, w) = (input[0], input[1], input[2]);
        let (wi, co, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wi != ci {
            return Err(Error::shape(
                op,
                format!("input channels {ci} != kernel in_channels {wi}"),
            ));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape(
                op,
                format!("padding {pad} consumes the whole {full_h}x{full_w} output"),
            ));
        }
        Ok(ConvGeometry {
            in_channels: co,
            in_h: full_h - 2 * pad,
            in_w: full_w - 2 * pad,
            out_channels: ci,
            out_h: h,
            out_w: w,
            kh,
            kw,
            stride,
            pad,
        })
    }

    fn k(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Multiply-accumulates of one forward pass, padding taps included.
    pub fn macs(&self) -> u64 {
        (self.out_channels * self.k() * self.out_plane()) as u64
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let rows = (BAND_PIXELS / self.out_w.max(1)).max(1);
        let out_h = self.out_h;
        (0..out_h).step_by(rows).map(move |r0| (r0, (r0 + rows).min(out_h)))
    }

    /// Fills `col` (`K x n` row-major, `n = rows * out_w`) for output rows
    /// `[r0, r1)`.
    fn im2col<T: Real>(&self, x: &[T], r0: usize, r1: usize, col: &mut [T]) {
        let n = (r1 - r0) * self.out_w;
        let (s, p) = (self.stride, self.pad);
        for c in 0..self.in_channels {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let k = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[k * n..(k + 1) * n];
                    for (ri, oy) in (r0..r1).enumerate() {
                        let row = &mut dst[ri * self.out_w..(ri + 1) * self.out_w];
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, v) in row.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *v = if ix < 0 || ix >= self.in_w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into `dx`; the adjoint of [`Self::im2col`].
    fn col2im<T: Real>(&self, col: &[T], r0: usize, r1: usize, dx: &mut [T]) {
        let n = (r1 - r0) * self.out_w;
        let (s, p) = (self.stride, self.pad);
        for c in 0..self.in_channels {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let k = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[k * n..(k + 1) * n];
                    for (ri, oy) in (r0..r1).enumerate() {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let row = &src[ri * self.out_w..(ri + 1) * self.out_w];
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, &v) in row.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// `y = W * x` (no bias).
    fn run_forward<T: Real>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let plane = self.out_plane();
        let k = self.k();
        let mut y = vec![T::zero(); self.out_channels * plane];
        let mut col = Vec::new();
        for (r0, r1) in self.bands() {
            let n = (r1 - r0) * self.out_w;
            col.resize(k * n, T::zero());
            self.im2col(x, r0, r1, &mut col);
            // SAFETY: W is O x K, col is K x n, the output band is O x n
            // with row stride `plane` inside `y`.
            unsafe {
                T::gemm(
                    self.out_channels,
                    k,
                    n,
                    T::one(),
                    w.as_ptr(),
                    k as isize,
                    1,
                    col.as_ptr(),
                    n as isize,
                    1,
                    T::zero(),
                    y.as_mut_ptr().add(r0 * self.out_w),
                    plane as isize,
                    1,
                );
            }
        }
        y
    }

    /// `dx = W^T * dy`, scattered back through im2col.
    fn run_backward_data<T: Real>(&self, dy: &[T], w: &[T]) -> Vec<T> {
        let plane = self.out_plane();
        let k = self.k();
        let mut dx = vec![T::zero(); self.in_channels * self.in_h * self.in_w];
        let mut col = Vec::new();
        for (r0, r1) in self.bands() {
            let n = (r1 - r0) * self.out_w;
            col.resize(k * n, T::zero());
            // SAFETY: W^T is K x O (strides swapped), the dy band is O x n.
            unsafe {
                T::gemm(
                    k,
                    self.out_channels,
                    n,
                    T::one(),
                    w.as_ptr(),
                    1,
                    k as isize,
                    dy.as_ptr().add(r0 * self.out_w),
                    plane as isize,
                    1,
                    T::zero(),
                    col.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            self.col2im(&col, r0, r1, &mut dx);
        }
        dx
    }

    /// `dW = dy * col^T`, accumulated band by band.
    fn run_backward_filter<T: Real>(&self, x: &[T], dy: &[T]) -> Vec<T> {
        let plane = self.out_plane();
        let k = self.k();
        let mut dw = vec![T::zero(); self.out_channels * k];
        let mut col = Vec::new();
        for (r0, r1) in self.bands() {
            let n = (r1 - r0) * self.out_w;
            col.resize(k * n, T::zero());
            self.im2col(x, r0, r1, &mut col);
            // SAFETY: dy band is O x n, col^T is n x K, dW is O x K.
            unsafe {
                T::gemm(
                    self.out_channels,
                    n,
                    k,
                    T::one(),
                    dy.as_ptr().add(r0 * self.out_w),
                    plane as isize,
                    1,
                    col.as_ptr(),
                    1,
                    n as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        dw
    }
}

/// Forward convolution of `x` (`[C, H, W]`) with `w` (`[O, C, kh, kw]`).
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::forward("conv2d", x.shape(), w.shape(), stride, pad)?;
    record_macs(g.macs());
    let y = g.run_forward(x.data(), w.data());
    Tensor::from_vec(&[g.out_channels, g.out_h, g.out_w], y)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_backward_input<T: Real>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    in_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::forward("conv2d_backward_input", in_shape, w.shape(), stride, pad)?;
    let dx = g.run_backward_data(dy.data(), w.data());
    Tensor::from_vec(in_shape, dx)
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_backward_weight<T: Real>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::forward("conv2d_backward_weight", x.shape(), w_shape, stride, pad)?;
    let dw = g.run_backward_filter(x.data(), dy.data());
    Tensor::from_vec(w_shape, dw)
}

/// Transposed convolution of `x` (`[Ci, H, W]`) with `w` (`[Ci, Co, kh, kw]`),
/// output `[Co, (H-1)*stride - 2*pad + kh, ...]`.
pub fn conv_transpose2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::transposed("conv_transpose2d", x.shape(), w.shape(), stride, pad)?;
    record_macs(g.macs());
    let y = g.run_backward_data(x.data(), w.data());
    Tensor::from_vec(&[g.in_channels, g.in_h, g.in_w], y)
}

/// Gradient of [`conv_transpose2d`] with respect to its input.
pub fn conv_transpose2d_backward_input<T: Real>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::forward("conv_transpose2d_backward_input", dy.shape(), w.shape(), stride, pad)?;
    let dx = g.run_forward(dy.data(), w.data());
    Tensor::from_vec(&[g.out_channels, g.out_h, g.out_w], dx)
}

/// Gradient of [`conv_transpose2d`] with respect to its weight.
pub fn conv_transpose2d_backward_weight<T: Real>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::forward("conv_transpose2d_backward_weight", dy.shape(), w_shape, stride, pad)?;
    let dw = g.run_backward_filter(dy.data(), x.data());
    Tensor::from_vec(w_shape, dw)
}
