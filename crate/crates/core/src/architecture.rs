//! The two-stage restoration network.
//!
//! The distortion mitigating (DM) module is a complex-valued encoder-decoder
//! over an `S`-level image pyramid. Each encoder scale lifts the pooled
//! input window to complex features, extracts a residual and subtracts it
//! from the input, giving `I_E^s`. The decoder walks back up, concatenating
//! lifted `I_E^s` with decoded features and adding residuals to build
//! `I_D^s`; `I_D^0` is `I_DM`. An optional complex UNet then refines
//! `I_DM` into the single restored current frame `I_Final`.
//!
//! Sub-modules carry the names used in the layer table of the original
//! design: `real2complex1..2S`, `feature1..2S`, `inner_most`,
//! `residual1..2S`. Encoder blocks take the low numbers, finest first;
//! decoder blocks continue the count from the coarsest scale upwards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Eager, Graph};
use crate::cvnn::{
    cadd_g, cconcat_g, cconv_act_g, cconv_g, real2complex_g, CConvParams, CVar, ComplexTensor, LiftParams, CLRELU_ALPHA,
};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Number of 3x3 convolutions inside every feature block.
pub const FEATURE_CONVS: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Frames before the current one, `N_b`.
    pub n_back: usize,
    /// Frames after the current one, `N_f`.
    pub n_forward: usize,
    /// Pyramid depth `S` of the DM module.
    pub scales: usize,
    /// Complex feature width.
    pub channels: usize,
    /// Negative-side gain of the complex leaky ReLU.
    pub alpha: f64,
    pub refinement_enabled: bool,
    /// Number of downsampling levels of the refinement UNet.
    pub unet_depth: usize,
    pub color_channels: usize,
    /// Ablation: imaginary weights and biases start at zero and stay
    /// frozen, reducing every layer to its real-valued counterpart.
    pub real_valued: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_back: 2,
            n_forward: 2,
            scales: 4,
            channels: 64,
            alpha: CLRELU_ALPHA,
            refinement_enabled: true,
            unet_depth: 5,
            color_channels: 3,
            real_valued: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: three frames, two scales, 32 channels.
    pub fn tiny() -> Self {
        ModelConfig {
            n_back: 1,
            n_forward: 1,
            scales: 2,
            channels: 32,
            ..ModelConfig::default()
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_back + self.n_forward + 1
    }

    /// Channels of a window: colour planes of all frames side by side.
    pub fn input_channels(&self) -> usize {
        self.color_channels * self.n_frames()
    }

    /// Channel range of the current frame inside a window.
    pub fn central_channels(&self) -> std::ops::Range<usize> {
        let start = self.n_back * self.color_channels;
        start..start + self.color_channels
    }

    /// Width of UNet level `l`: doubling from `channels`, capped at four times it.
    pub fn unet_channels(&self, level: usize) -> usize {
        (self.channels << level.min(2)).min(4 * self.channels)
    }

    /// Spatial divisor every input must satisfy.
    pub fn required_divisor(&self) -> usize {
        let dm = 1usize << self.scales;
        if self.refinement_enabled {
            dm.max(1 << self.unet_depth)
        } else {
            dm
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(Error::Config(format!("scales must be at least 2, got {}", self.scales)));
        }
        if self.channels == 0 || self.color_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.refinement_enabled && self.unet_depth == 0 {
            return Err(Error::Config("unet_depth must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.scales > 16 || self.unet_depth > 16 {
            return Err(Error::Config("pyramid depth too large".into()));
        }
        Ok(())
    }

    /// Checks a window shape before any computation.
    pub fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let (c, h, w) = match *shape {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::shape(
                    "model_forward",
                    format!("expected [C, H, W], got {shape:?}"),
                ))
            }
        };
        if c != self.input_channels() {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "window has {c} channels, expected {} (3 x {} frames)",
                    self.input_channels(),
                    self.n_frames()
                ),
            ));
        }
        let d = self.required_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::shape(
                "model_forward",
                format!("{h}x{w} is not divisible by {d}"),
            ));
        }
        Ok((h, w))
    }
}

/// `N_t` frames stacked along channels in temporal order, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow<T> {
    pub data: Tensor<T>,
    pub n_frames: usize,
}

impl<T: Real> FrameWindow<T> {
    pub fn from_frames(frames: &[&Tensor<T>]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::shape("frame_window", "no frames"));
        }
        Ok(FrameWindow {
            data: Tensor::concat_channels(frames)?,
            n_frames: frames.len(),
        })
    }

    /// Central frame of the window.
    pub fn current(&self) -> Tensor<T> {
        let per = self.data.shape()[0] / self.n_frames;
        let start = (self.n_frames / 2) * per;
        self.data.slice_channels(start, start + per)
    }
}

// ---------------------------------------------------------------------------
// Parameter layout

/// Nine 3x3 convolutions and an optional resampling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlockParams {
    pub convs: Vec<CConvParams>,
    pub resample: Option<CConvParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    None,
    Down,
    Up,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmLayout {
    pub enc_lift: Vec<LiftParams>,
    pub enc_feature: Vec<FeatureBlockParams>,
    pub enc_residual: Vec<CConvParams>,
    pub inner_conv: CConvParams,
    pub inner_up: CConvParams,
    /// Decoder entries are indexed by scale, finest first.
    pub dec_lift: Vec<LiftParams>,
    pub dec_feature: Vec<FeatureBlockParams>,
    pub dec_residual: Vec<CConvParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnetLevel {
    pub conv1: CConvParams,
    pub conv2: CConvParams,
    pub resample: CConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnetLayout {
    pub lift: LiftParams,
    pub down: Vec<UnetLevel>,
    pub bottom: [CConvParams; 2],
    /// Indexed by level, finest first; `resample` is the transposed
    /// convolution arriving at that level.
    pub up: Vec<UnetLevel>,
    pub tail: CConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub dm: DmLayout,
    pub unet: Option<UnetLayout>,
}

/// Configuration, parameter handles and parameter values of a network.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub params: ParamStore<T>,
}

/// 1-based table numbering of encoder scale `s`.
fn enc_number(s: usize) -> usize {
    s + 1
}

/// 1-based table numbering of decoder scale `s` with `S` scales.
fn dec_number(s: usize, scales: usize) -> usize {
    2 * scales - s
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn conv(
        &mut self,
        name: &str,
        i: usize,
        o: usize,
        k: usize,
        stride: usize,
        pad: usize,
        tr: bool,
    ) -> Result<CConvParams> {
        CConvParams::init(self.store, name, i, o, k, stride, pad, tr, &mut self.rng)
    }

    fn conv3(&mut self, name: &str, i: usize, o: usize) -> Result<CConvParams> {
        self.conv(name, i, o, 3, 1, 1, false)
    }

    fn down(&mut self, name: &str, i: usize, o: usize) -> Result<CConvParams> {
        self.conv(name, i, o, 4, 2, 1, false)
    }

    fn up(&mut self, name: &str, i: usize, o: usize) -> Result<CConvParams> {
        self.conv(name, i, o, 4, 2, 1, true)
    }

    fn lift(&mut self, name: &str, i: usize, o: usize) -> Result<LiftParams> {
        LiftParams::init(self.store, name, i, o, &mut self.rng)
    }

    fn feature(&mut self, name: &str, in_ch: usize, ch: usize, resample: Resample) -> Result<FeatureBlockParams> {
        let mut convs = Vec::with_capacity(FEATURE_CONVS);
        for k in 0..FEATURE_CONVS {
            let i = if k == 0 { in_ch } else { ch };
            convs.push(self.conv3(&format!("{name}.conv{k}"), i, ch)?);
        }
        let resample = match resample {
            Resample::None => None,
            Resample::Down => Some(self.down(&format!("{name}.down"), ch, ch)?),
            Resample::Up => Some(self.up(&format!("{name}.up"), ch, ch)?),
        };
        Ok(FeatureBlockParams { convs, resample })
    }
}

/// Deterministic Glorot-uniform initialization with zero biases.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let (s_count, ch, cin) = (config.scales, config.channels, config.input_channels());

    let mut enc_lift = Vec::new();
    let mut enc_feature = Vec::new();
    let mut enc_residual = Vec::new();
    for s in 0..s_count {
        let n = enc_number(s);
        enc_lift.push(init.lift(&format!("real2complex{n}"), cin, ch)?);
        enc_feature.push(init.feature(&format!("feature{n}"), ch, ch, Resample::Down)?);
        enc_residual.push(init.conv3(&format!("residual{n}"), ch, cin)?);
    }
    let inner_conv = init.conv3("inner_most.conv", ch, ch)?;
    let inner_up = init.up("inner_most.up", ch, ch)?;
    let mut dec = Vec::new();
    for s in (0..s_count).rev() {
        let n = dec_number(s, s_count);
        let lift = init.lift(&format!("real2complex{n}"), cin, ch)?;
        let resample = if s == 0 { Resample::None } else { Resample::Up };
        let feature = init.feature(&format!("feature{n}"), 2 * ch, ch, resample)?;
        let residual = init.conv3(&format!("residual{n}"), ch, cin)?;
        dec.push((lift, feature, residual));
    }
    dec.reverse();
    let dm = DmLayout {
        enc_lift,
        enc_feature,
        enc_residual,
        inner_conv,
        inner_up,
        dec_lift: dec.iter().map(|d| d.0).collect(),
        dec_feature: dec.iter().map(|d| d.1.clone()).collect(),
        dec_residual: dec.iter().map(|d| d.2).collect(),
    };

    let unet = if config.refinement_enabled {
        let depth = config.unet_depth;
        let c = |l| config.unet_channels(l);
        let lift = init.lift("refine.real2complex", cin, c(0))?;
        let mut down = Vec::new();
        for l in 0..depth {
            down.push(UnetLevel {
                conv1: init.conv3(&format!("refine.down{l}.conv1"), c(l), c(l))?,
                conv2: init.conv3(&format!("refine.down{l}.conv2"), c(l), c(l))?,
                resample: init.down(&format!("refine.down{l}.down"), c(l), c(l + 1))?,
            });
        }
        let bottom = [
            init.conv3("refine.bottom.conv1", c(depth), c(depth))?,
            init.conv3("refine.bottom.conv2", c(depth), c(depth))?,
        ];
        let mut up = Vec::new();
        for l in (0..depth).rev() {
            up.push(UnetLevel {
                resample: init.up(&format!("refine.up{l}.up"), c(l + 1), c(l))?,
                conv1: init.conv3(&format!("refine.up{l}.conv1"), 2 * c(l), c(l))?,
                conv2: init.conv3(&format!("refine.up{l}.conv2"), c(l), c(l))?,
            });
        }
        up.reverse();
        let tail = init.conv3("refine.tail", c(0), config.color_channels)?;
        Some(UnetLayout {
            lift,
            down,
            bottom,
            up,
            tail,
        })
    } else {
        None
    };

    let layout = ModelLayout { dm, unet };
    if config.real_valued {
        for id in layout.imaginary_ids() {
            let t = store.get_mut(id);
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            store.freeze(id);
        }
    }
    Ok(Model {
        config: config.clone(),
        layout,
        params: store,
    })
}

impl ModelLayout {
    fn all_convs(&self) -> Vec<CConvParams> {
        let dm = &self.dm;
        let mut v = Vec::new();
        let block = |b: &FeatureBlockParams, v: &mut Vec<CConvParams>| {
            v.extend(b.convs.iter().copied());
            v.extend(b.resample);
        };
        for b in dm.enc_feature.iter().chain(&dm.dec_feature) {
            block(b, &mut v);
        }
        v.extend(dm.enc_residual.iter().chain(&dm.dec_residual).copied());
        v.push(dm.inner_conv);
        v.push(dm.inner_up);
        if let Some(u) = &self.unet {
            for l in u.down.iter().chain(&u.up) {
                v.extend([l.conv1, l.conv2, l.resample]);
            }
            v.extend(u.bottom);
            v.push(u.tail);
        }
        v
    }

    fn all_lifts(&self) -> Vec<LiftParams> {
        let mut v: Vec<LiftParams> = self.dm.enc_lift.iter().chain(&self.dm.dec_lift).copied().collect();
        if let Some(u) = &self.unet {
            v.push(u.lift);
        }
        v
    }

    /// Imaginary weights and biases of every layer.
    pub fn imaginary_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.all_convs().iter().flat_map(|c| [c.w_im, c.b_im]).collect();
        ids.extend(self.all_lifts().iter().flat_map(|l| [l.w_im, l.b_im]));
        ids.sort();
        ids
    }
}

// ---------------------------------------------------------------------------
// Forward pass

/// Output shapes of named sub-modules in evaluation order, `[C, H, W]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShapeTrace {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    fn push(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.entries.push((name.into(), shape.to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }
}

/// Graph-level outputs of [`model_forward_g`].
#[derive(Debug, Clone)]
pub struct PyramidVars<V> {
    /// `I_E^s`, finest first, `3 N_t` channels each.
    pub encoder: Vec<V>,
    /// `I_D^s`, finest first; `decoder[0]` is `I_DM`.
    pub decoder: Vec<V>,
    /// `I_Final`, present iff refinement is enabled.
    pub final_out: Option<V>,
}

fn cshape<T: Real, G: Graph<T>>(g: &G, x: &CVar<G::Var>) -> Vec<usize> {
    g.value(&x.re).shape().to_vec()
}

/// Nine convolution stages, then the optional resampling layer. Returns
/// the features before and after resampling.
pub fn feature_block_g<T: Real, G: Graph<T>>(
    g: &mut G,
    x: &CVar<G::Var>,
    p: &FeatureBlockParams,
    alpha: f64,
) -> Result<(CVar<G::Var>, CVar<G::Var>)> {
    let mut h = x.clone();
    for c in &p.convs {
        h = cconv_act_g(g, &h, c, alpha)?;
    }
    let out = match &p.resample {
        Some(r) => {
            let shape = cshape(g, &h);
            if !r.transposed && (shape[1] < 2 || shape[2] < 2) {
                return Err(Error::shape(
                    "feature_block",
                    format!("{}x{} is too small to downsample", shape[1], shape[2]),
                ));
            }
            cconv_act_g(g, &h, r, alpha)?
        }
        None => h.clone(),
    };
    Ok((h, out))
}

/// 3x3 complex convolution to image channels, split leaky ReLU.
pub fn residual_extract_g<T: Real, G: Graph<T>>(
    g: &mut G,
    features: &CVar<G::Var>,
    p: &CConvParams,
    alpha: f64,
) -> Result<CVar<G::Var>> {
    cconv_act_g(g, features, p, alpha)
}

/// Complex to real as `Re z + Im z`. Unlike the magnitude this keeps the
/// sign, so residuals can darken as well as brighten.
pub fn signed_projection_g<T: Real, G: Graph<T>>(g: &mut G, z: &CVar<G::Var>) -> Result<G::Var> {
    g.add(&z.re, &z.im)
}

/// Distortion mitigating module. `x` is a `[3 N_t, H, W]` window.
pub fn dm_forward_g<T: Real, G: Graph<T>>(
    g: &mut G,
    model: &ModelLayout,
    config: &ModelConfig,
    x: &G::Var,
    trace: &mut ShapeTrace,
) -> Result<(Vec<G::Var>, Vec<G::Var>)> {
    let dm = &model.dm;
    let alpha = config.alpha;
    let s_count = config.scales;

    let mut pooled = vec![x.clone()];
    for s in 1..s_count {
        let p = g.avg_pool2(&pooled[s - 1])?;
        pooled.push(p);
    }

    let mut encoder = Vec::with_capacity(s_count);
    let mut carry: Option<CVar<G::Var>> = None;
    for s in 0..s_count {
        let n = enc_number(s);
        let lift = real2complex_g(g, &pooled[s], &dm.enc_lift[s], alpha)?;
        trace.push(format!("real2complex{n}"), &cshape(g, &lift));
        let h = match &carry {
            Some(c) => cadd_g(g, &lift, c)?,
            None => lift,
        };
        let (f, down) = feature_block_g(g, &h, &dm.enc_feature[s], alpha)?;
        trace.push(format!("feature{n}"), &cshape(g, &f));
        let r = residual_extract_g(g, &f, &dm.enc_residual[s], alpha)?;
        trace.push(format!("residual{n}"), &cshape(g, &r));
        // (pooled + 0i) - r, back to real by magnitude
        let diff = g.sub(&pooled[s], &r.re)?;
        let mag = g.magnitude(&diff, &r.im)?;
        encoder.push(g.tanh(&mag)?);
        carry = Some(down);
    }

    let bottom = carry.expect("at least one scale");
    let inner = cconv_act_g(g, &bottom, &dm.inner_conv, alpha)?;
    trace.push("inner_most.conv", &cshape(g, &inner));
    let mut u = cconv_act_g(g, &inner, &dm.inner_up, alpha)?;
    trace.push("inner_most.up", &cshape(g, &u));

    let mut decoder: Vec<Option<G::Var>> = vec![None; s_count];
    for s in (0..s_count).rev() {
        let n = dec_number(s, s_count);
        let lift = real2complex_g(g, &encoder[s], &dm.dec_lift[s], alpha)?;
        trace.push(format!("real2complex{n}"), &cshape(g, &lift));
        let h = cconcat_g(g, &u, &lift)?;
        let (f, next) = feature_block_g(g, &h, &dm.dec_feature[s], alpha)?;
        trace.push(format!("feature{n}"), &cshape(g, &next));
        let r = residual_extract_g(g, &f, &dm.dec_residual[s], alpha)?;
        trace.push(format!("residual{n}"), &cshape(g, &r));
        let base = match &decoder.get(s + 1).cloned().flatten() {
            Some(coarser) => g.upsample_nearest2(coarser)?,
            None => encoder[s].clone(),
        };
        let proj = signed_projection_g(g, &r)?;
        let sum = g.add(&base, &proj)?;
        decoder[s] = Some(g.tanh(&sum)?);
        u = next;
    }
    let decoder = decoder.into_iter().map(|d| d.expect("every scale decoded")).collect();
    Ok((encoder, decoder))
}

/// Complex UNet mapping the `N_t`-frame DM output to the current frame.
pub fn refinement_forward_g<T: Real, G: Graph<T>>(
    g: &mut G,
    unet: &UnetLayout,
    config: &ModelConfig,
    x: &G::Var,
    trace: &mut ShapeTrace,
) -> Result<G::Var> {
    let shape = g.value(x).shape().to_vec();
    let d = 1usize << config.unet_depth;
    if shape.len() != 3 || shape[1] % d != 0 || shape[2] % d != 0 {
        return Err(Error::shape(
            "refinement_forward",
            format!("{shape:?} is not divisible by {d}"),
        ));
    }
    let alpha = config.alpha;
    let mut h = real2complex_g(g, x, &unet.lift, alpha)?;
    trace.push("refine.real2complex", &cshape(g, &h));
    let mut skips = Vec::with_capacity(unet.down.len());
    for (l, level) in unet.down.iter().enumerate() {
        h = cconv_act_g(g, &h, &level.conv1, alpha)?;
        h = cconv_act_g(g, &h, &level.conv2, alpha)?;
        trace.push(format!("refine.down{l}"), &cshape(g, &h));
        skips.push(h.clone());
        h = cconv_act_g(g, &h, &level.resample, alpha)?;
    }
    for c in &unet.bottom {
        h = cconv_act_g(g, &h, c, alpha)?;
    }
    trace.push("refine.bottom", &cshape(g, &h));
    for (l, level) in unet.up.iter().enumerate().rev() {
        let up = cconv_act_g(g, &h, &level.resample, alpha)?;
        h = cconcat_g(g, &up, &skips[l])?;
        h = cconv_act_g(g, &h, &level.conv1, alpha)?;
        h = cconv_act_g(g, &h, &level.conv2, alpha)?;
        trace.push(format!("refine.up{l}"), &cshape(g, &h));
    }
    let out = cconv_g(g, &h, &unet.tail)?;
    let proj = signed_projection_g(g, &out)?;
    let y = g.tanh(&proj)?;
    trace.push("refine.output", g.value(&y).shape());
    Ok(y)
}

/// DM module, then refinement when enabled.
pub fn model_forward_g<T: Real, G: Graph<T>>(
    g: &mut G,
    model: &ModelLayout,
    config: &ModelConfig,
    x: &G::Var,
    trace: &mut ShapeTrace,
) -> Result<PyramidVars<G::Var>> {
    config.check_input(g.value(x).shape())?;
    trace.push("input", g.value(x).shape());
    let (encoder, decoder) = dm_forward_g(g, model, config, x, trace)?;
    let final_out = match (&model.unet, config.refinement_enabled) {
        (Some(unet), true) => Some(refinement_forward_g(g, unet, config, &decoder[0], trace)?),
        (None, true) => {
            return Err(Error::Config(
                "refinement enabled but the model has no refinement parameters".into(),
            ))
        }
        _ => None,
    };
    Ok(PyramidVars {
        encoder,
        decoder,
        final_out,
    })
}

// ---------------------------------------------------------------------------
// Eager API

/// Everything the training objective needs from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidOutputs<T> {
    pub encoder_images: Vec<Tensor<T>>,
    pub decoder_images: Vec<Tensor<T>>,
    pub final_image: Option<Tensor<T>>,
    pub trace: ShapeTrace,
    central: std::ops::Range<usize>,
    refinement: bool,
}

impl<T: Real> PyramidOutputs<T> {
    /// `I_DM`: all frames with refinement, the current frame otherwise.
    pub fn dm_output(&self) -> Tensor<T> {
        if self.refinement {
            self.decoder_images[0].clone()
        } else {
            self.decoder_images[0].slice_channels(self.central.start, self.central.end)
        }
    }

    /// The restored current frame: `I_Final` or the central slice of `I_DM`.
    pub fn restored(&self) -> Tensor<T> {
        match &self.final_image {
            Some(f) => f.clone(),
            None => self.decoder_images[0].slice_channels(self.central.start, self.central.end),
        }
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        init_params(config, seed)
    }

    /// Forward pass without recording gradients.
    pub fn forward(&self, window: &Tensor<T>) -> Result<PyramidOutputs<T>> {
        let mut g = Eager::new(&self.params);
        let x = g.input(window.clone());
        let mut trace = ShapeTrace::default();
        let out = model_forward_g(&mut g, &self.layout, &self.config, &x, &mut trace)?;
        Ok(PyramidOutputs {
            encoder_images: out.encoder.iter().map(|v| v.as_ref().clone()).collect(),
            decoder_images: out.decoder.iter().map(|v| v.as_ref().clone()).collect(),
            final_image: out.final_out.map(|v| v.as_ref().clone()),
            trace,
            central: self.config.central_channels(),
            refinement: self.config.refinement_enabled,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }
}

/// Eager form of [`dm_forward_g`].
pub fn dm_forward<T: Real>(window: &FrameWindow<T>, model: &Model<T>) -> Result<PyramidOutputs<T>> {
    let mut cfg = model.config.clone();
    cfg.refinement_enabled = false;
    cfg.check_input(window.data.shape())?;
    let mut g = Eager::new(&model.params);
    let x = g.input(window.data.clone());
    let mut trace = ShapeTrace::default();
    let (enc, dec) = dm_forward_g(&mut g, &model.layout, &cfg, &x, &mut trace)?;
    Ok(PyramidOutputs {
        encoder_images: enc.iter().map(|v| v.as_ref().clone()).collect(),
        decoder_images: dec.iter().map(|v| v.as_ref().clone()).collect(),
        final_image: None,
        trace,
        central: cfg.central_channels(),
        refinement: model.config.refinement_enabled,
    })
}

/// Eager form of [`refinement_forward_g`] on a `[3 N_t, H, W]` input.
pub fn refinement_forward<T: Real>(x: &Tensor<T>, model: &Model<T>) -> Result<Tensor<T>> {
    let unet = model
        .layout
        .unet
        .as_ref()
        .ok_or_else(|| Error::Config("model has no refinement parameters".into()))?;
    let mut g = Eager::new(&model.params);
    let xv = g.input(x.clone());
    let y = refinement_forward_g(&mut g, unet, &model.config, &xv, &mut ShapeTrace::default())?;
    Ok(y.as_ref().clone())
}

/// Eager form of [`model_forward_g`].
pub fn model_forward<T: Real>(window: &FrameWindow<T>, model: &Model<T>) -> Result<PyramidOutputs<T>> {
    model.forward(&window.data)
}

/// Eager feature block on a complex tensor.
pub fn feature_block_forward<T: Real>(
    x: &ComplexTensor<T>,
    block: &FeatureBlockParams,
    params: &ParamStore<T>,
    alpha: f64,
) -> Result<ComplexTensor<T>> {
    let mut g = Eager::new(params);
    let xv = CVar {
        re: g.input(x.re.clone()),
        im: g.input(x.im.clone()),
    };
    let (_, out) = feature_block_g(&mut g, &xv, block, alpha)?;
    ComplexTensor::new(out.re.as_ref().clone(), out.im.as_ref().clone())
}

/// Eager residual extraction on a complex tensor.
pub fn residual_extract_forward<T: Real>(
    features: &ComplexTensor<T>,
    p: &CConvParams,
    params: &ParamStore<T>,
    alpha: f64,
) -> Result<ComplexTensor<T>> {
    let mut g = Eager::new(params);
    let xv = CVar {
        re: g.input(features.re.clone()),
        im: g.input(features.im.clone()),
    };
    let r = residual_extract_g(&mut g, &xv, p, alpha)?;
    ComplexTensor::new(r.re.as_ref().clone(), r.im.as_ref().clone())
}
