//! Primitive operations and their local derivatives.

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::{compensated_sum, Real, Tensor};

/// 5-tap binomial kernel used by the Laplacian pyramid.
pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    /// `(x, w)`, weight `[O, C, kh, kw]`.
    Conv2d {
        stride: usize,
        pad: usize,
    },
    /// `(x, w)`, weight `[Ci, Co, kh, kw]`.
    ConvTranspose2d {
        stride: usize,
        pad: usize,
    },
    /// `(x, b)`, one bias per channel.
    AddBias,
    Add,
    Sub,
    Scale(f64),
    LeakyRelu(f64),
    Tanh,
    /// `(re, im) -> sqrt(re^2 + im^2)`.
    Magnitude,
    Concat,
    SliceChannels {
        start: usize,
        end: usize,
    },
    AvgPool2,
    UpsampleNearest2,
    /// Binomial blur along one axis with reflect padding.
    Blur5(Axis),
    Decimate2,
    ZeroInsert2,
    /// Scalar `mean(sqrt((a - b)^2 + eps^2))`.
    Charbonnier(f64),
    /// Scalar `mean(|a - b|)`.
    MeanAbsDiff,
    /// Scalar `mean((a - b)^2)`.
    Mse,
    /// Scalar sum of all elements.
    Sum,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::AddBias => "add_bias",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Scale(_) => "scale",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Magnitude => "magnitude",
            Op::Concat => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::AvgPool2 => "avg_pool2",
            Op::UpsampleNearest2 => "upsample_nearest2",
            Op::Blur5(_) => "blur5",
            Op::Decimate2 => "decimate2",
            Op::ZeroInsert2 => "zero_insert2",
            Op::Charbonnier(_) => "charbonnier",
            Op::MeanAbsDiff => "mean_abs_diff",
            Op::Mse => "mse",
            Op::Sum => "sum",
        }
    }

    /// Non-smooth points, as a sign pattern over the relevant argument.
    pub(crate) fn kink_argument<T: Real>(&self, inputs: &[&Tensor<T>]) -> Option<Vec<bool>> {
        match self {
            Op::LeakyRelu(_) => Some(inputs[0].data().iter().map(|v| *v >= T::zero()).collect()),
            Op::MeanAbsDiff => Some(
                inputs[0]
                    .data()
                    .iter()
                    .zip(inputs[1].data())
                    .map(|(a, b)| *a >= *b)
                    .collect(),
            ),
            _ => None,
        }
    }
}

fn same_shape<T: Real>(op: Op, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op.name(),
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rank3<T: Real>(op: Op, a: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.shape().len() != 3 {
        return Err(Error::shape(op.name(), format!("expected rank 3, got {:?}", a.shape())));
    }
    Ok(a.chw())
}

/// Mirror index `i` into `[0, n)` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

fn blur5<T: Real>(x: &Tensor<T>, axis: Axis) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let k: Vec<T> = BINOMIAL5.iter().map(|&v| T::from_f64(v)).collect();
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
                for (t, &kv) in k.iter().enumerate() {
                    let off = t as isize - 2;
                    let idx = match axis {
                        Axis::Cols => base + y * w + reflect_index(xx as isize + off, w),
                        Axis::Rows => base + reflect_index(y as isize + off, h) * w + xx,
                    };
                    acc += kv * src[idx];
                }
                out[base + y * w + xx] = acc;
            }
        }
    }
    Tensor::from_vec(x.shape(), out).expect("shape preserved")
}

fn blur5_adjoint<T: Real>(dy: &Tensor<T>, axis: Axis) -> Tensor<T> {
    let (c, h, w) = dy.chw();
    let k: Vec<T> = BINOMIAL5.iter().map(|&v| T::from_f64(v)).collect();
    let src = dy.data();
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let g = src[base + y * w + xx];
                for (t, &kv) in k.iter().enumerate() {
                    let off = t as isize - 2;
                    let idx = match axis {
                        Axis::Cols => base + y * w + reflect_index(xx as isize + off, w),
                        Axis::Rows => base + reflect_index(y as isize + off, h) * w + xx,
                    };
                    out[idx] += kv * g;
                }
            }
        }
    }
    Tensor::from_vec(dy.shape(), out).expect("shape preserved")
}

pub(crate) fn forward<T: Real>(op: Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match op {
        Op::Conv2d { stride, pad } => conv::conv2d(inputs[0], inputs[1], stride, pad),
        Op::ConvTranspose2d { stride, pad } => conv::conv_transpose2d(inputs[0], inputs[1], stride, pad),
        Op::AddBias => {
            let (c, h, w) = rank3(op, inputs[0])?;
            let b = inputs[1];
            if b.len() != c {
                return Err(Error::shape(
                    op.name(),
                    format!("bias length {} != channels {c}", b.len()),
                ));
            }
            let mut out = inputs[0].clone();
            for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
                let bv = b.data()[ch];
                for v in plane {
                    *v += bv;
                }
            }
            Ok(out)
        }
        Op::Add => {
            same_shape(op, inputs[0], inputs[1])?;
            Ok(inputs[0].zip_map(inputs[1], |a, b| a + b))
        }
        Op::Sub => {
            same_shape(op, inputs[0], inputs[1])?;
            Ok(inputs[0].zip_map(inputs[1], |a, b| a - b))
        }
        Op::Scale(k) => Ok(inputs[0].scale(T::from_f64(k))),
        Op::LeakyRelu(alpha) => {
            let a = T::from_f64(alpha);
            Ok(inputs[0].map(|v| if v >= T::zero() { v } else { v * a }))
        }
        Op::Tanh => Ok(inputs[0].map(T::tanh)),
        Op::Magnitude => {
            same_shape(op, inputs[0], inputs[1])?;
            Ok(inputs[0].zip_map(inputs[1], |r, i| (r * r + i * i).sqrt()))
        }
        Op::Concat => Tensor::concat_channels(&[inputs[0], inputs[1]]),
        Op::SliceChannels { start, end } => {
            let (c, _, _) = rank3(op, inputs[0])?;
            if start >= end || end > c {
                return Err(Error::shape(
                    op.name(),
                    format!("channel range {start}..{end} outside 0..{c}"),
                ));
            }
            Ok(inputs[0].slice_channels(start, end))
        }
        Op::AvgPool2 => {
            let (c, h, w) = rank3(op, inputs[0])?;
            if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                return Err(Error::shape(op.name(), format!("{h}x{w} is not divisible by 2")));
            }
            let (oh, ow) = (h / 2, w / 2);
            let x = inputs[0].data();
            let quarter = T::from_f64(0.25);
            Ok(Tensor::from_fn(&[c, oh, ow], |i| {
                let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
                let b = ch * h * w + 2 * y * w + 2 * xx;
                (x[b] + x[b + 1] + x[b + w] + x[b + w + 1]) * quarter
            }))
        }
        Op::UpsampleNearest2 => {
            let (c, h, w) = rank3(op, inputs[0])?;
            let (oh, ow) = (2 * h, 2 * w);
            let x = inputs[0].data();
            Ok(Tensor::from_fn(&[c, oh, ow], |i| {
                let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
                x[ch * h * w + (y / 2) * w + xx / 2]
            }))
        }
        Op::Blur5(axis) => {
            rank3(op, inputs[0])?;
            Ok(blur5(inputs[0], axis))
        }
        Op::Decimate2 => {
            let (c, h, w) = rank3(op, inputs[0])?;
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            let x = inputs[0].data();
            Ok(Tensor::from_fn(&[c, oh, ow], |i| {
                let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
                x[ch * h * w + 2 * y * w + 2 * xx]
            }))
        }
        Op::ZeroInsert2 => {
            let (c, h, w) = rank3(op, inputs[0])?;
            let (oh, ow) = (2 * h, 2 * w);
            let x = inputs[0].data();
            Ok(Tensor::from_fn(&[c, oh, ow], |i| {
                let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
                if y % 2 == 0 && xx % 2 == 0 {
                    x[ch * h * w + (y / 2) * w + xx / 2]
                } else {
                    T::zero()
                }
            }))
        }
        Op::Charbonnier(eps) => {
            same_shape(op, inputs[0], inputs[1])?;
            // eps + mean(d^2 / (sqrt(d^2 + eps^2) + eps)): the same value
            // as mean(sqrt(d^2 + eps^2)), but exactly eps for d = 0
            let e = T::from_f64(eps);
            let n = T::from_f64(inputs[0].len() as f64);
            let s = compensated_sum(inputs[0].data().iter().zip(inputs[1].data()).map(|(&a, &b)| {
                let d2 = (a - b) * (a - b);
                d2 / ((d2 + e * e).sqrt() + e)
            }));
            Ok(Tensor::scalar(e + s / n))
        }
        Op::MeanAbsDiff => {
            same_shape(op, inputs[0], inputs[1])?;
            let n = T::from_f64(inputs[0].len() as f64);
            let s = compensated_sum(
                inputs[0]
                    .data()
                    .iter()
                    .zip(inputs[1].data())
                    .map(|(&a, &b)| (a - b).abs()),
            );
            Ok(Tensor::scalar(s / n))
        }
        Op::Mse => {
            same_shape(op, inputs[0], inputs[1])?;
            let n = T::from_f64(inputs[0].len() as f64);
            let s = compensated_sum(
                inputs[0]
                    .data()
                    .iter()
                    .zip(inputs[1].data())
                    .map(|(&a, &b)| (a - b) * (a - b)),
            );
            Ok(Tensor::scalar(s / n))
        }
        Op::Sum => Ok(Tensor::scalar(inputs[0].sum())),
    }
}

/// Forward of `op` with the side of every non-smooth point prescribed
/// instead of read off the inputs.
pub(crate) fn forward_on_sides<T: Real>(op: Op, inputs: &[&Tensor<T>], sides: &[bool]) -> Result<Tensor<T>> {
    if !matches!(op, Op::LeakyRelu(_) | Op::MeanAbsDiff) {
        return forward(op, inputs);
    }
    if sides.len() != inputs[0].len() {
        return Err(Error::shape(
            op.name(),
            format!("{} kink sides for {} elements", sides.len(), inputs[0].len()),
        ));
    }
    match op {
        Op::LeakyRelu(alpha) => {
            let a = T::from_f64(alpha);
            let data = inputs[0]
                .data()
                .iter()
                .zip(sides)
                .map(|(&v, &up)| if up { v } else { v * a })
                .collect();
            Tensor::from_vec(inputs[0].shape(), data)
        }
        Op::MeanAbsDiff => {
            same_shape(op, inputs[0], inputs[1])?;
            let n = T::from_f64(inputs[0].len() as f64);
            let s = compensated_sum(
                inputs[0]
                    .data()
                    .iter()
                    .zip(inputs[1].data())
                    .zip(sides)
                    .map(|((&a, &b), &up)| if up { a - b } else { b - a }),
            );
            Ok(Tensor::scalar(s / n))
        }
        _ => forward(op, inputs),
    }
}

/// Vector-Jacobian product: gradients for each input given `dy`.
pub(crate) fn backward<T: Real>(
    op: Op,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let grads = match op {
        Op::Conv2d { stride, pad } => vec![
            conv::conv2d_backward_input(dy, inputs[1], inputs[0].shape(), stride, pad)?,
            conv::conv2d_backward_weight(inputs[0], dy, inputs[1].shape(), stride, pad)?,
        ],
        Op::ConvTranspose2d { stride, pad } => vec![
            conv::conv_transpose2d_backward_input(dy, inputs[1], stride, pad)?,
            conv::conv_transpose2d_backward_weight(inputs[0], dy, inputs[1].shape(), stride, pad)?,
        ],
        Op::AddBias => {
            let (c, h, w) = dy.chw();
            let db = Tensor::from_fn(&[c], |ch| dy.data()[ch * h * w..(ch + 1) * h * w].iter().copied().sum());
            vec![dy.clone(), db]
        }
        Op::Add => vec![dy.clone(), dy.clone()],
        Op::Sub => vec![dy.clone(), dy.scale(-T::one())],
        Op::Scale(k) => vec![dy.scale(T::from_f64(k))],
        Op::LeakyRelu(alpha) => {
            let a = T::from_f64(alpha);
            vec![inputs[0].zip_map(dy, |x, g| if x >= T::zero() { g } else { g * a })]
        }
        Op::Tanh => vec![output.zip_map(dy, |y, g| g * (T::one() - y * y))],
        Op::Magnitude => {
            let (re, im) = (inputs[0], inputs[1]);
            let mut dre = Vec::with_capacity(re.len());
            let mut dim = Vec::with_capacity(re.len());
            for ((&r, &i), (&m, &g)) in re.data().iter().zip(im.data()).zip(output.data().iter().zip(dy.data())) {
                if m > T::zero() {
                    dre.push(g * r / m);
                    dim.push(g * i / m);
                } else {
                    dre.push(T::zero());
                    dim.push(T::zero());
                }
            }
            vec![Tensor::from_vec(re.shape(), dre)?, Tensor::from_vec(im.shape(), dim)?]
        }
        Op::Concat => {
            let ca = inputs[0].chw().0;
            let cb = inputs[1].chw().0;
            vec![dy.slice_channels(0, ca), dy.slice_channels(ca, ca + cb)]
        }
        Op::SliceChannels { start, end } => {
            let (c, h, w) = inputs[0].chw();
            let mut g = Tensor::zeros(&[c, h, w]);
            g.data_mut()[start * h * w..end * h * w].copy_from_slice(dy.data());
            vec![g]
        }
        Op::AvgPool2 => {
            let (c, h, w) = inputs[0].chw();
            let (oh, ow) = (h / 2, w / 2);
            let quarter = T::from_f64(0.25);
            let d = dy.data();
            vec![Tensor::from_fn(&[c, h, w], |i| {
                let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
                d[ch * oh * ow + (y / 2) * ow + xx / 2] * quarter
            })]
        }
        Op::UpsampleNearest2 => {
            let (c, h, w) = inputs[0].chw();
            let ow = 2 * w;
            let d = dy.data();
            vec![Tensor::from_fn(&[c, h, w], |i| {
                let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
                let b = ch * 4 * h * w + 2 * y * ow + 2 * xx;
                d[b] + d[b + 1] + d[b + ow] + d[b + ow + 1]
            })]
        }
        Op::Blur5(axis) => vec![blur5_adjoint(dy, axis)],
        Op::Decimate2 => {
            let (c, h, w) = inputs[0].chw();
            let (_, dh, dw) = dy.chw();
            let mut g = Tensor::zeros(&[c, h, w]);
            let gd = g.data_mut();
            for ch in 0..c {
                for y in 0..dh {
                    for x in 0..dw {
                        gd[ch * h * w + 2 * y * w + 2 * x] = dy.data()[(ch * dh + y) * dw + x];
                    }
                }
            }
            vec![g]
        }
        Op::ZeroInsert2 => {
            let (c, h, w) = inputs[0].chw();
            let ow = 2 * w;
            let d = dy.data();
            vec![Tensor::from_fn(&[c, h, w], |i| {
                let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
                d[ch * 4 * h * w + 2 * y * ow + 2 * xx]
            })]
        }
        Op::Charbonnier(eps) => {
            let e2 = T::from_f64(eps * eps);
            let scale = dy.item() / T::from_f64(inputs[0].len() as f64);
            let da = inputs[0].zip_map(inputs[1], |a, b| scale * (a - b) / ((a - b) * (a - b) + e2).sqrt());
            let db = da.scale(-T::one());
            vec![da, db]
        }
        Op::MeanAbsDiff => {
            let scale = dy.item() / T::from_f64(inputs[0].len() as f64);
            let da = inputs[0].zip_map(inputs[1], |a, b| {
                if a > b {
                    scale
                } else if a < b {
                    -scale
                } else {
                    T::zero()
                }
            });
            let db = da.scale(-T::one());
            vec![da, db]
        }
        Op::Mse => {
            let scale = T::from_f64(2.0) * dy.item() / T::from_f64(inputs[0].len() as f64);
            let da = inputs[0].zip_map(inputs[1], |a, b| scale * (a - b));
            let db = da.scale(-T::one());
            vec![da, db]
        }
        Op::Sum => vec![Tensor::full(inputs[0].shape(), dy.item())],
    };
    Ok(grads)
}
