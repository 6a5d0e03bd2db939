//! Complex-valued convolutional primitives.
//!
//! A complex feature map is a pair of real tensors. Convolving it with a
//! complex kernel `H = H_re + i H_im` takes four real convolutions:
//!
//! ```text
//! re = H_re * I_re - H_im * I_im + b_re
//! im = H_im * I_re + H_re * I_im + b_im
//! ```
//!
//! The free functions at the top of this module work on owned tensors. The
//! `*_g` variants build the same computation on any [`Graph`] so it can be
//! differentiated.

use rand::Rng;

use crate::autodiff::Graph;
use crate::conv;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Default negative-slope gain of the complex leaky ReLU.
pub const CLRELU_ALPHA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor<T> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Real> ComplexTensor<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::shape(
                "complex_tensor",
                format!("real part {:?} and imaginary part {:?} differ", re.shape(), im.shape()),
            ));
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        ComplexTensor {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }

    /// Embeds a real tensor with zero imaginary part.
    pub fn from_real(re: Tensor<T>) -> Self {
        let im = Tensor::zeros(re.shape());
        ComplexTensor { re, im }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// Complex convolution weights.
///
/// Forward kernels use the `[out, in, kh, kw]` layout. Kernels fed to
/// [`complex_conv_transpose2d`] use `[in, out, kh, kw]`, the adjoint
/// layout of the convolution they transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexKernel<T> {
    pub real_weights: Tensor<T>,
    pub imag_weights: Tensor<T>,
    pub real_bias: Tensor<T>,
    pub imag_bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ComplexKernel<T> {
    pub fn new(
        real_weights: Tensor<T>,
        imag_weights: Tensor<T>,
        real_bias: Tensor<T>,
        imag_bias: Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let k = ComplexKernel {
            real_weights,
            imag_weights,
            real_bias,
            imag_bias,
            stride,
            padding,
        };
        k.validate(false)?;
        Ok(k)
    }

    /// Zero-bias kernel.
    pub fn without_bias(
        real_weights: Tensor<T>,
        imag_weights: Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::without_bias_for(real_weights, imag_weights, stride, padding, false)
    }

    /// Zero-bias kernel for a transposed convolution (`[in, out, kh, kw]`).
    pub fn transposed_without_bias(
        real_weights: Tensor<T>,
        imag_weights: Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::without_bias_for(real_weights, imag_weights, stride, padding, true)
    }

    fn without_bias_for(
        real_weights: Tensor<T>,
        imag_weights: Tensor<T>,
        stride: usize,
        padding: usize,
        transposed: bool,
    ) -> Result<Self> {
        let out = if transposed {
            real_weights.shape().get(1)
        } else {
            real_weights.shape().first()
        }
        .copied()
        .unwrap_or(0);
        let k = ComplexKernel {
            real_weights,
            imag_weights,
            real_bias: Tensor::zeros(&[out]),
            imag_bias: Tensor::zeros(&[out]),
            stride,
            padding,
        };
        k.validate(transposed)?;
        Ok(k)
    }

    fn out_channels(&self, transposed: bool) -> usize {
        let s = self.real_weights.shape();
        if transposed {
            s[1]
        } else {
            s[0]
        }
    }

    fn validate(&self, transposed: bool) -> Result<()> {
        let op = if transposed {
            "complex_conv_transpose2d"
        } else {
            "complex_conv2d"
        };
        if self.real_weights.shape().len() != 4 {
            return Err(Error::shape(
                op,
                format!("weight rank {} != 4", self.real_weights.shape().len()),
            ));
        }
        if self.real_weights.shape() != self.imag_weights.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "real weights {:?} and imaginary weights {:?} differ",
                    self.real_weights.shape(),
                    self.imag_weights.shape()
                ),
            ));
        }
        let out = self.out_channels(transposed);
        for (name, b) in [("real_bias", &self.real_bias), ("imag_bias", &self.imag_bias)] {
            if b.len() != out {
                return Err(Error::shape(
                    op,
                    format!("{name} length {} != out_channels {out}", b.len()),
                ));
            }
        }
        if self.stride == 0 {
            return Err(Error::shape(op, "stride must be positive"));
        }
        Ok(())
    }
}

fn add_bias<T: Real>(x: &mut Tensor<T>, b: &Tensor<T>) {
    let (_, h, w) = x.chw();
    for (plane, &bv) in x.data_mut().chunks_mut(h * w).zip(b.data()) {
        for v in plane {
            *v += bv;
        }
    }
}

fn combine<T: Real>(
    rr: Tensor<T>,
    ii: Tensor<T>,
    ir: Tensor<T>,
    ri: Tensor<T>,
    kernel: &ComplexKernel<T>,
) -> ComplexTensor<T> {
    let mut re = rr.zip_map(&ii, |a, b| a - b);
    let mut im = ir.zip_map(&ri, |a, b| a + b);
    add_bias(&mut re, &kernel.real_bias);
    add_bias(&mut im, &kernel.imag_bias);
    ComplexTensor { re, im }
}

/// Complex 2-D convolution as four real convolutions.
pub fn complex_conv2d<T: Real>(input: &ComplexTensor<T>, kernel: &ComplexKernel<T>) -> Result<ComplexTensor<T>> {
    kernel.validate(false)?;
    let (s, p) = (kernel.stride, kernel.padding);
    let rr = conv::conv2d(&input.re, &kernel.real_weights, s, p)?;
    let ii = conv::conv2d(&input.im, &kernel.imag_weights, s, p)?;
    let ir = conv::conv2d(&input.re, &kernel.imag_weights, s, p)?;
    let ri = conv::conv2d(&input.im, &kernel.real_weights, s, p)?;
    Ok(combine(rr, ii, ir, ri, kernel))
}

/// Complex transposed convolution; kernel layout `[in, out, kh, kw]`.
pub fn complex_conv_transpose2d<T: Real>(
    input: &ComplexTensor<T>,
    kernel: &ComplexKernel<T>,
) -> Result<ComplexTensor<T>> {
    kernel.validate(true)?;
    let (s, p) = (kernel.stride, kernel.padding);
    let rr = conv::conv_transpose2d(&input.re, &kernel.real_weights, s, p)?;
    let ii = conv::conv_transpose2d(&input.im, &kernel.imag_weights, s, p)?;
    let ir = conv::conv_transpose2d(&input.re, &kernel.imag_weights, s, p)?;
    let ri = conv::conv_transpose2d(&input.im, &kernel.real_weights, s, p)?;
    Ok(combine(rr, ii, ir, ri, kernel))
}

fn leaky<T: Real>(v: T, alpha: T) -> T {
    if v >= T::zero() {
        v
    } else {
        v * alpha
    }
}

/// Leaky ReLU applied to the real and imaginary parts independently.
pub fn clrelu<T: Real>(x: &ComplexTensor<T>, alpha: f64) -> ComplexTensor<T> {
    let a = T::from_f64(alpha);
    ComplexTensor {
        re: x.re.map(|v| leaky(v, a)),
        im: x.im.map(|v| leaky(v, a)),
    }
}

/// Element-wise modulus.
pub fn complex_magnitude<T: Real>(x: &ComplexTensor<T>) -> Tensor<T> {
    x.re.zip_map(&x.im, |r, i| (r * r + i * i).sqrt())
}

/// Element-wise `tanh`, bounding outputs to `(-1, 1)`.
pub fn tanh_cap<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(T::tanh)
}

/// Two independent real convolution banks producing the real and imaginary
/// parts of a complex feature map from a real image.
#[derive(Debug, Clone, PartialEq)]
pub struct RealToComplexKernel<T> {
    pub real_weights: Tensor<T>,
    pub real_bias: Tensor<T>,
    pub imag_weights: Tensor<T>,
    pub imag_bias: Tensor<T>,
}

/// Lifts a real image into complex features: two real 3x3 convolutions
/// followed by the complex leaky ReLU.
pub fn real2complex_block<T: Real>(
    input: &Tensor<T>,
    kernel: &RealToComplexKernel<T>,
    alpha: f64,
) -> Result<ComplexTensor<T>> {
    if kernel.real_weights.shape() != kernel.imag_weights.shape() {
        return Err(Error::shape("real2complex", "real and imaginary banks differ in shape"));
    }
    let pad = kernel.real_weights.shape()[2] / 2;
    let mut re = conv::conv2d(input, &kernel.real_weights, 1, pad)?;
    let mut im = conv::conv2d(input, &kernel.imag_weights, 1, pad)?;
    add_bias(&mut re, &kernel.real_bias);
    add_bias(&mut im, &kernel.imag_bias);
    Ok(clrelu(&ComplexTensor { re, im }, alpha))
}

// ---------------------------------------------------------------------------
// Graph-level building blocks.

/// Complex value living on a [`Graph`].
#[derive(Debug, Clone)]
pub struct CVar<V> {
    pub re: V,
    pub im: V,
}

/// Parameter handles of one complex (transposed) convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CConvParams {
    pub w_re: ParamId,
    pub w_im: ParamId,
    pub b_re: ParamId,
    pub b_im: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

/// Parameter handles of a real-to-complex lifting block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiftParams {
    pub w_re: ParamId,
    pub b_re: ParamId,
    pub w_im: ParamId,
    pub b_im: ParamId,
}

/// Glorot-uniform bound treating each complex channel as one channel.
pub fn glorot_bound(in_ch: usize, out_ch: usize, k: usize) -> f64 {
    let fan_in = (in_ch * k * k) as f64;
    let fan_out = (out_ch * k * k) as f64;
    (6.0 / (fan_in + fan_out)).sqrt()
}

fn uniform_tensor<T: Real, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

#[allow(clippy::too_many_arguments)]
impl CConvParams {
    /// Registers a complex layer `in_ch -> out_ch` with a `k x k` kernel.
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        transposed: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = if transposed {
            [in_ch, out_ch, k, k]
        } else {
            [out_ch, in_ch, k, k]
        };
        let bound = glorot_bound(in_ch, out_ch, k);
        let w_re = store.insert(format!("{name}.weight.re"), uniform_tensor(&shape, bound, rng))?;
        let w_im = store.insert(format!("{name}.weight.im"), uniform_tensor(&shape, bound, rng))?;
        let b_re = store.insert(format!("{name}.bias.re"), Tensor::zeros(&[out_ch]))?;
        let b_im = store.insert(format!("{name}.bias.im"), Tensor::zeros(&[out_ch]))?;
        Ok(CConvParams {
            w_re,
            w_im,
            b_re,
            b_im,
            stride,
            pad,
            transposed,
        })
    }

    pub fn kernel<T: Real>(&self, store: &ParamStore<T>) -> ComplexKernel<T> {
        ComplexKernel {
            real_weights: store.get(self.w_re).clone(),
            imag_weights: store.get(self.w_im).clone(),
            real_bias: store.get(self.b_re).clone(),
            imag_bias: store.get(self.b_im).clone(),
            stride: self.stride,
            padding: self.pad,
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_re, self.w_im, self.b_re, self.b_im]
    }
}

impl LiftParams {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [out_ch, in_ch, 3, 3];
        let bound = glorot_bound(in_ch, out_ch, 3);
        let w_re = store.insert(format!("{name}.re.weight"), uniform_tensor(&shape, bound, rng))?;
        let b_re = store.insert(format!("{name}.re.bias"), Tensor::zeros(&[out_ch]))?;
        let w_im = store.insert(format!("{name}.im.weight"), uniform_tensor(&shape, bound, rng))?;
        let b_im = store.insert(format!("{name}.im.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(LiftParams { w_re, b_re, w_im, b_im })
    }

    pub fn kernel<T: Real>(&self, store: &ParamStore<T>) -> RealToComplexKernel<T> {
        RealToComplexKernel {
            real_weights: store.get(self.w_re).clone(),
            real_bias: store.get(self.b_re).clone(),
            imag_weights: store.get(self.w_im).clone(),
            imag_bias: store.get(self.b_im).clone(),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_re, self.b_re, self.w_im, self.b_im]
    }
}

/// Complex (transposed) convolution on a graph.
pub fn cconv_g<T: Real, G: Graph<T>>(g: &mut G, x: &CVar<G::Var>, p: &CConvParams) -> Result<CVar<G::Var>> {
    let w_re = g.param(p.w_re);
    let w_im = g.param(p.w_im);
    let b_re = g.param(p.b_re);
    let b_im = g.param(p.b_im);
    let conv = |g: &mut G, x: &G::Var, w: &G::Var| {
        if p.transposed {
            g.conv_transpose2d(x, w, p.stride, p.pad)
        } else {
            g.conv2d(x, w, p.stride, p.pad)
        }
    };
    let rr = conv(g, &x.re, &w_re)?;
    let ii = conv(g, &x.im, &w_im)?;
    let ir = conv(g, &x.re, &w_im)?;
    let ri = conv(g, &x.im, &w_re)?;
    let re = g.sub(&rr, &ii)?;
    let im = g.add(&ir, &ri)?;
    Ok(CVar {
        re: g.add_bias(&re, &b_re)?,
        im: g.add_bias(&im, &b_im)?,
    })
}

pub fn clrelu_g<T: Real, G: Graph<T>>(g: &mut G, x: &CVar<G::Var>, alpha: f64) -> Result<CVar<G::Var>> {
    Ok(CVar {
        re: g.leaky_relu(&x.re, alpha)?,
        im: g.leaky_relu(&x.im, alpha)?,
    })
}

/// Convolution followed by the complex leaky ReLU.
pub fn cconv_act_g<T: Real, G: Graph<T>>(
    g: &mut G,
    x: &CVar<G::Var>,
    p: &CConvParams,
    alpha: f64,
) -> Result<CVar<G::Var>> {
    let y = cconv_g(g, x, p)?;
    clrelu_g(g, &y, alpha)
}

pub fn cadd_g<T: Real, G: Graph<T>>(g: &mut G, a: &CVar<G::Var>, b: &CVar<G::Var>) -> Result<CVar<G::Var>> {
    Ok(CVar {
        re: g.add(&a.re, &b.re)?,
        im: g.add(&a.im, &b.im)?,
    })
}

pub fn cconcat_g<T: Real, G: Graph<T>>(g: &mut G, a: &CVar<G::Var>, b: &CVar<G::Var>) -> Result<CVar<G::Var>> {
    Ok(CVar {
        re: g.concat(&a.re, &b.re)?,
        im: g.concat(&a.im, &b.im)?,
    })
}

pub fn real2complex_g<T: Real, G: Graph<T>>(g: &mut G, x: &G::Var, p: &LiftParams, alpha: f64) -> Result<CVar<G::Var>> {
    let w_re = g.param(p.w_re);
    let b_re = g.param(p.b_re);
    let w_im = g.param(p.w_im);
    let b_im = g.param(p.b_im);
    let re = g.conv2d(x, &w_re, 1, 1)?;
    let re = g.add_bias(&re, &b_re)?;
    let im = g.conv2d(x, &w_im, 1, 1)?;
    let im = g.add_bias(&im, &b_im)?;
    clrelu_g(g, &CVar { re, im }, alpha)
}

pub fn magnitude_g<T: Real, G: Graph<T>>(g: &mut G, x: &CVar<G::Var>) -> Result<G::Var> {
    g.magnitude(&x.re, &x.im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Eager, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn delta3(v: f32) -> Tensor<f32> {
        let mut t = Tensor::zeros(&[1, 1, 3, 3]);
        t.data_mut()[4] = v;
        t
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ComplexTensor::new(random(&[1, 5, 5], &mut rng), random(&[1, 5, 5], &mut rng)).unwrap();
        let k = ComplexKernel::without_bias(delta3(1.0), delta3(0.0), 1, 1).unwrap();
        let y = complex_conv2d(&x, &k).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn imaginary_unit_rotates_real_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random(&[1, 5, 5], &mut rng);
        let x = ComplexTensor::from_real(r.clone());
        let k = ComplexKernel::without_bias(delta3(0.0), delta3(1.0), 1, 1).unwrap();
        let y = complex_conv2d(&x, &k).unwrap();
        assert!(y.re.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.im, r);
    }

    #[test]
    fn transpose_of_zero_input_is_bias() {
        let w = Tensor::<f32>::full(&[2, 3, 4, 4], 0.5);
        let k = ComplexKernel::new(
            w.clone(),
            w,
            Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap(),
            Tensor::from_vec(&[3], vec![-0.1, -0.2, -0.3]).unwrap(),
            2,
            1,
        );
        // forward-layout bias length check rejects a transposed kernel
        assert!(k.is_err());
        let k = ComplexKernel {
            real_weights: Tensor::full(&[2, 3, 4, 4], 0.5),
            imag_weights: Tensor::full(&[2, 3, 4, 4], 0.5),
            real_bias: Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap(),
            imag_bias: Tensor::from_vec(&[3], vec![-0.1, -0.2, -0.3]).unwrap(),
            stride: 2,
            padding: 1,
        };
        let y = complex_conv_transpose2d(&ComplexTensor::zeros(&[2, 4, 4]), &k).unwrap();
        assert_eq!(y.shape(), &[3, 8, 8]);
        for c in 0..3 {
            assert!(y.re.plane(c).iter().all(|&v| v == k.real_bias.data()[c]));
            assert!(y.im.plane(c).iter().all(|&v| v == k.imag_bias.data()[c]));
        }
    }

    #[test]
    fn clrelu_examples() {
        let x = ComplexTensor::new(
            Tensor::from_vec(&[1, 1, 3], vec![3.0f32, -1.0, -0.5]).unwrap(),
            Tensor::from_vec(&[1, 1, 3], vec![4.0f32, 2.0, -1.0]).unwrap(),
        )
        .unwrap();
        let y = clrelu(&x, 0.2);
        let expect_re = [3.0f32, -0.2, -0.1];
        let expect_im = [4.0f32, 2.0, -0.2];
        for i in 0..3 {
            assert!((y.re.data()[i] - expect_re[i]).abs() < 1e-7);
            assert!((y.im.data()[i] - expect_im[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn magnitude_and_tanh_examples() {
        let x = ComplexTensor::new(
            Tensor::from_vec(&[1, 1, 2], vec![3.0f32, 0.0]).unwrap(),
            Tensor::from_vec(&[1, 1, 2], vec![4.0f32, 0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(complex_magnitude(&x).data(), &[5.0, 0.0]);
        let t = tanh_cap(&Tensor::from_vec(&[3], vec![0.0f64, 20.0, -20.0]).unwrap());
        assert_eq!(t.data()[0], 0.0);
        assert!((t.data()[1] - 1.0).abs() < 1e-6);
        assert!((t.data()[2] + 1.0).abs() < 1e-6);
        let h = 1e-5;
        let d = ((h as f64).tanh() - (-h as f64).tanh()) / (2.0 * h);
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn magnitude_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ComplexTensor::new(random(&[2, 4, 4], &mut rng), random(&[2, 4, 4], &mut rng)).unwrap();
        let m = complex_magnitude(&x);
        for i in 0..m.len() {
            let (r, im) = (x.re.data()[i] as f64, x.im.data()[i] as f64);
            assert!((m.data()[i] as f64 - r.hypot(im)).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_input_with_pointwise_kernel_is_complex_product() {
        let (cr, ci, hr, hi) = (0.75f32, -0.5f32, 0.25f32, 1.5f32);
        let x = ComplexTensor::new(Tensor::full(&[1, 3, 3], cr), Tensor::full(&[1, 3, 3], ci)).unwrap();
        let k = ComplexKernel::without_bias(Tensor::full(&[1, 1, 1, 1], hr), Tensor::full(&[1, 1, 1, 1], hi), 1, 0)
            .unwrap();
        let y = complex_conv2d(&x, &k).unwrap();
        assert!(y.re.data().iter().all(|&v| v == cr * hr - ci * hi));
        assert!(y.im.data().iter().all(|&v| v == ci * hr + cr * hi));
    }

    #[test]
    fn real2complex_zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::<f32>::new();
        let p = LiftParams::init(&mut s, "lift", 15, 8, &mut rng).unwrap();
        let y = real2complex_block(&Tensor::zeros(&[15, 8, 8]), &p.kernel(&s), CLRELU_ALPHA).unwrap();
        assert_eq!(y.shape(), &[8, 8, 8]);
        assert!(y.re.data().iter().chain(y.im.data()).all(|&v| v == 0.0));
        let bad = real2complex_block(&Tensor::zeros(&[12, 8, 8]), &p.kernel(&s), CLRELU_ALPHA);
        assert!(bad.is_err());
    }

    #[test]
    fn real2complex_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::<f64>::new();
        let p = LiftParams::init(&mut s, "lift", 3, 4, &mut rng).unwrap();
        let x: Tensor<f64> = Tensor::from_fn(&[3, 6, 6], |_| rng.random_range(-1.0..1.0));
        fn total<G: Graph<f64>>(g: &mut G, x: &Tensor<f64>, p: &LiftParams) -> G::Var {
            let xi = g.input(x.clone());
            let y = real2complex_g(g, &xi, p, CLRELU_ALPHA).unwrap();
            let a = g.sum(&y.re).unwrap();
            let b = g.sum(&y.im).unwrap();
            g.add(&a, &b).unwrap()
        }
        let mut tape = Tape::new(&s);
        let loss = total(&mut tape, &x, &p);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-4;
        for id in [p.w_re, p.w_im] {
            for i in 0..s.get(id).len() {
                let mut sp = s.clone();
                sp.get_mut(id).data_mut()[i] += h;
                let mut sm = s.clone();
                sm.get_mut(id).data_mut()[i] -= h;
                let fp = total(&mut Eager::new(&sp), &x, &p).item();
                let fm = total(&mut Eager::new(&sm), &x, &p).item();
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.get(id).unwrap().data()[i];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "{} [{i}] {an} vs {fd}", s.name(id));
            }
        }
    }

    proptest! {
        #[test]
        fn complex_conv_is_real_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| ComplexTensor::new(random(&[2, 6, 6], rng), random(&[2, 6, 6], rng)).unwrap();
            let x = mk(&mut rng);
            let y = mk(&mut rng);
            let k = ComplexKernel::without_bias(random(&[3, 2, 3, 3], &mut rng), random(&[3, 2, 3, 3], &mut rng), 1, 1).unwrap();
            let (af, bf) = (a as f32, b as f32);
            let mix = ComplexTensor::new(
                x.re.zip_map(&y.re, |p, q| af * p + bf * q),
                x.im.zip_map(&y.im, |p, q| af * p + bf * q),
            ).unwrap();
            let lhs = complex_conv2d(&mix, &k).unwrap();
            let kx = complex_conv2d(&x, &k).unwrap();
            let ky = complex_conv2d(&y, &k).unwrap();
            for i in 0..lhs.re.len() {
                let r = af * kx.re.data()[i] + bf * ky.re.data()[i];
                let m = af * kx.im.data()[i] + bf * ky.im.data()[i];
                prop_assert!((lhs.re.data()[i] - r).abs() < 1e-5);
                prop_assert!((lhs.im.data()[i] - m).abs() < 1e-5);
            }
        }

        #[test]
        fn clrelu_preserves_signs(vals in proptest::collection::vec(-10.0f32..10.0, 2..40)) {
            let n = vals.len() / 2;
            let x = ComplexTensor::new(
                Tensor::from_vec(&[1, 1, n], vals[..n].to_vec()).unwrap(),
                Tensor::from_vec(&[1, 1, n], vals[n..2 * n].to_vec()).unwrap(),
            ).unwrap();
            let y = clrelu(&x, CLRELU_ALPHA);
            for i in 0..n {
                let (xr, xi) = (x.re.data()[i], x.im.data()[i]);
                let (yr, yi) = (y.re.data()[i], y.im.data()[i]);
                if xr >= 0.0 && xi >= 0.0 {
                    prop_assert_eq!((yr, yi), (xr, xi));
                }
                prop_assert_eq!(yr.signum(), xr.signum());
                prop_assert_eq!(yi.signum(), xi.signum());
                prop_assert!(yr.is_finite() && yi.is_finite());
            }
        }
    }
}
