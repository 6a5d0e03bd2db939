//! Sliding-window samples, the Adam optimizer and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::architecture::{model_forward_g, Model, ModelConfig, ShapeTrace};
use crate::autodiff::{Eager, Graph, Tape};
use crate::error::{Error, Result};
use crate::losses::{total_train_loss_g, LossBreakdown, LossConfig, LossTerms};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// When set, training stops after exactly this many optimizer steps,
    /// running as many epochs as needed.
    pub max_steps: Option<usize>,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Side of the square training crop.
    pub crop: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub charbonnier_epsilon: f64,
    pub pyramid_levels: usize,
    /// With refinement enabled, supervise every frame slot of the decoder
    /// pyramid with its own clean frame. Otherwise (and always without
    /// refinement) only the current-frame slot is supervised.
    pub supervise_all_frames: bool,
    /// Also attach Charbonnier terms to the encoder images `I_E^s`.
    pub supervise_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 200,
            max_steps: None,
            batch_size: 1,
            crop: 256,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            charbonnier_epsilon: 1e-3,
            pyramid_levels: 3,
            supervise_all_frames: true,
            supervise_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.crop == 0 || self.crop % 32 != 0 {
            return Err(Error::Config(format!(
                "crop must be a positive multiple of 32, got {}",
                self.crop
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("invalid Adam hyper-parameters".into()));
        }
        self.loss_config(2).validate()
    }

    pub fn loss_config(&self, scales: usize) -> LossConfig {
        LossConfig {
            epsilon: self.charbonnier_epsilon,
            pyramid_levels: self.pyramid_levels,
            scale_count: scales,
        }
    }
}

/// Distorted and clean versions of one video, frames `[3, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPair {
    pub distorted: Vec<Tensor<f32>>,
    pub clean: Vec<Tensor<f32>>,
}

impl VideoPair {
    pub fn new(distorted: Vec<Tensor<f32>>, clean: Vec<Tensor<f32>>) -> Result<Self> {
        if distorted.is_empty() {
            return Err(Error::Config("video pair has no frames".into()));
        }
        if distorted.len() != clean.len() {
            return Err(Error::shape(
                "video_pair",
                format!("{} distorted frames vs {} clean frames", distorted.len(), clean.len()),
            ));
        }
        let shape = distorted[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(
                "video_pair",
                format!("frames must be [C, H, W], got {shape:?}"),
            ));
        }
        for (i, (d, c)) in distorted.iter().zip(&clean).enumerate() {
            if d.shape() != shape.as_slice() || c.shape() != shape.as_slice() {
                return Err(Error::shape("video_pair", format!("frame {i} differs from {shape:?}")));
            }
        }
        Ok(VideoPair { distorted, clean })
    }

    pub fn len(&self) -> usize {
        self.distorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distorted.is_empty()
    }
}

/// Frame indices of the window centred on `t`, replicating the first and
/// last frames at the ends.
pub fn window_indices(t: usize, len: usize, n_back: usize, n_forward: usize) -> Vec<usize> {
    let last = len.saturating_sub(1) as isize;
    (-(n_back as isize)..=n_forward as isize)
        .map(|d| (t as isize + d).clamp(0, last) as usize)
        .collect()
}

/// One supervised window, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub video: usize,
    pub frame: usize,
    /// `[3 N_t, crop, crop]`.
    pub distorted: Tensor<f32>,
    /// Clean frames of the same window, `[3 N_t, crop, crop]`.
    pub clean_window: Tensor<f32>,
    /// `[3, crop, crop]`.
    pub clean_current: Tensor<f32>,
}

fn to_signed(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| 2.0 * v - 1.0)
}

fn crop(t: &Tensor<f32>, y: usize, x: usize, size: usize) -> Tensor<f32> {
    let (c, _, w) = t.chw();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = t.plane(ch);
        for row in y..y + size {
            out.extend_from_slice(&plane[row * w + x..row * w + x + size]);
        }
    }
    Tensor::from_vec(&[c, size, size], out).expect("crop fits")
}

/// Builds the window around frame `t` with the crop origin `(y, x)`.
pub fn make_sample(
    pair: &VideoPair,
    video: usize,
    t: usize,
    n_back: usize,
    n_forward: usize,
    size: usize,
    (y, x): (usize, usize),
) -> Result<TrainingSample> {
    let idx = window_indices(t, pair.len(), n_back, n_forward);
    let gather = |frames: &[Tensor<f32>]| -> Result<Tensor<f32>> {
        let crops: Vec<Tensor<f32>> = idx.iter().map(|&i| to_signed(&crop(&frames[i], y, x, size))).collect();
        Tensor::concat_channels(&crops.iter().collect::<Vec<_>>())
    };
    Ok(TrainingSample {
        video,
        frame: t,
        distorted: gather(&pair.distorted)?,
        clean_window: gather(&pair.clean)?,
        clean_current: to_signed(&crop(&pair.clean[t], y, x, size)),
    })
}

fn check_crop(pair: &VideoPair, size: usize) -> Result<(usize, usize)> {
    let (_, h, w) = pair.distorted[0].chw();
    if h < size || w < size {
        return Err(Error::shape(
            "build_windows",
            format!("{h}x{w} frames are smaller than the {size}x{size} crop"),
        ));
    }
    Ok((h, w))
}

/// One sample per timestamp with a random aligned crop each.
pub fn build_windows(
    pair: &VideoPair,
    n_back: usize,
    n_forward: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingSample>> {
    let (h, w) = check_crop(pair, size)?;
    (0..pair.len())
        .map(|t| {
            let y = rng.random_range(0..=h - size);
            let x = rng.random_range(0..=w - size);
            make_sample(pair, 0, t, n_back, n_forward, size, (y, x))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.adam_epsilon,
        }
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable tensor. A missing
/// gradient counts as zero; frozen tensors are left alone. Nothing is
/// modified if any gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() || grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient of {} has shape {:?}", params.name(id), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} is not finite",
                    params.name(id)
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if params.is_frozen(id) {
            continue;
        }
        let g = grads.get(id);
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::from_f64(mi);
            v[i] = T::from_f64(vi);
            let update = cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + cfg.epsilon);
            p[i] = T::from_f64(p[i].as_f64() - update);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Objective

/// Targets of one sample, prepared once per step.
#[derive(Debug, Clone)]
pub struct SampleTargets<T> {
    /// Per-scale clean images matching the supervised decoder channels.
    pub pyramid: Vec<Tensor<T>>,
    /// Clean current frame, present iff refinement is enabled.
    pub current: Option<Tensor<T>>,
    /// Supervised channel range of the decoder images.
    pub channels: std::ops::Range<usize>,
}

fn avg_pool_chain<T: Real>(x: &Tensor<T>, levels: usize) -> Result<Vec<Tensor<T>>> {
    let store = ParamStore::<T>::new();
    let mut g = Eager::new(&store);
    let mut v = g.input(x.clone());
    let mut out = vec![x.clone()];
    for _ in 1..levels {
        v = g.avg_pool2(&v)?;
        out.push(v.as_ref().clone());
    }
    Ok(out)
}

impl<T: Real> SampleTargets<T> {
    pub fn new(
        model: &ModelConfig,
        train: &TrainConfig,
        clean_window: &Tensor<T>,
        clean_current: &Tensor<T>,
    ) -> Result<Self> {
        let all = model.refinement_enabled && train.supervise_all_frames;
        let (base, channels) = if all {
            (clean_window.clone(), 0..model.input_channels())
        } else {
            (clean_current.clone(), model.central_channels())
        };
        Ok(SampleTargets {
            pyramid: avg_pool_chain(&base, model.scales)?,
            current: model.refinement_enabled.then(|| clean_current.clone()),
            channels,
        })
    }
}

/// Loss of one window on any graph: forward pass, then the training objective.
pub fn sample_loss_g<T: Real, G: Graph<T>>(
    g: &mut G,
    model: &Model<T>,
    train: &TrainConfig,
    window: &Tensor<T>,
    targets: &SampleTargets<T>,
) -> Result<(LossTerms<G::Var>, G::Var)> {
    let cfg = &model.config;
    let x = g.input(window.clone());
    let out = model_forward_g(g, &model.layout, cfg, &x, &mut ShapeTrace::default())?;
    let full = targets.channels.len() == cfg.input_channels();
    let mut decoder = Vec::with_capacity(out.decoder.len());
    for d in &out.decoder {
        decoder.push(if full {
            d.clone()
        } else {
            g.slice_channels(d, targets.channels.start, targets.channels.end)?
        });
    }
    let pyramid: Vec<G::Var> = targets.pyramid.iter().map(|t| g.input(t.clone())).collect();
    let current = targets.current.as_ref().map(|t| g.input(t.clone()));
    let mut terms = total_train_loss_g(
        g,
        &decoder,
        &pyramid,
        out.final_out.as_ref(),
        current.as_ref(),
        &train.loss_config(cfg.scales),
    )?;
    if train.supervise_encoder {
        for (e, t) in out.encoder.iter().zip(&pyramid) {
            let e = if full {
                e.clone()
            } else {
                g.slice_channels(e, targets.channels.start, targets.channels.end)?
            };
            let c = g.charbonnier(&e, t, train.charbonnier_epsilon)?;
            terms.charbonnier_sum = g.add(&terms.charbonnier_sum, &c)?;
            terms.total = g.add(&terms.total, &c)?;
            terms.charbonnier.push(c);
        }
    }
    let restored = out.final_out.clone().unwrap_or_else(|| out.decoder[0].clone());
    Ok((terms, restored))
}

/// Loss and gradients of one sample.
pub fn sample_gradients<T: Real>(
    model: &Model<T>,
    train: &TrainConfig,
    sample: &TrainingSample,
) -> Result<(LossBreakdown, Gradients<T>, Vec<f64>)> {
    let window: Tensor<T> = sample.distorted.cast();
    let targets = SampleTargets::new(
        &model.config,
        train,
        &sample.clean_window.cast(),
        &sample.clean_current.cast(),
    )?;
    let mut tape = Tape::new(&model.params);
    let (terms, restored) = sample_loss_g(&mut tape, model, train, &window, &targets)?;
    let breakdown = terms.breakdown(&tape);
    let stats = channel_std(tape.value(&restored), &model.config);
    let grads = tape.backward(terms.total)?;
    Ok((breakdown, grads, stats))
}

/// Loss of one sample without gradients.
pub fn sample_loss<T: Real>(model: &Model<T>, train: &TrainConfig, sample: &TrainingSample) -> Result<LossBreakdown> {
    let window: Tensor<T> = sample.distorted.cast();
    let targets = SampleTargets::new(
        &model.config,
        train,
        &sample.clean_window.cast(),
        &sample.clean_current.cast(),
    )?;
    let mut g = Eager::new(&model.params);
    let (terms, _) = sample_loss_g(&mut g, model, train, &window, &targets)?;
    Ok(terms.breakdown(&g))
}

/// Standard deviation of each colour plane of the restored current frame.
/// A plane collapsing to a constant shows up as a value near zero.
fn channel_std<T: Real>(restored: &Tensor<T>, cfg: &ModelConfig) -> Vec<f64> {
    let c = restored.shape()[0];
    let range = if c == cfg.color_channels {
        0..c
    } else {
        cfg.central_channels()
    };
    range
        .map(|ch| {
            let p = restored.plane(ch);
            let n = p.len() as f64;
            let mean = p.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            (p.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Loop

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub charbonnier_sum: f64,
    pub laplacian: f64,
    pub l2: f64,
    /// Per colour plane standard deviation of the restored frame.
    pub output_channel_std: Vec<f64>,
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,epoch,total,charbonnier_sum,laplacian,l2\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e}",
            r.step, r.epoch, r.total, r.charbonnier_sum, r.laplacian, r.l2
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub history: Vec<LossRecord>,
}

/// Trains `model` on sliding windows over every video in `dataset`.
///
/// Each epoch visits every timestamp of every video once in a seeded
/// shuffled order with a fresh random crop. Batch gradients are computed
/// in parallel and summed in sample order, so results do not depend on
/// the thread count.
pub fn train_loop(
    dataset: &[VideoPair],
    model: Model<f32>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() || dataset.iter().all(VideoPair::is_empty) {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let dims: Vec<(usize, usize)> = dataset.iter().map(|p| check_crop(p, cfg.crop)).collect::<Result<_>>()?;
    let mc = model.config.clone();
    let mut model = model;
    let mut adam = AdamState::new(&model.params);
    let adam_cfg = AdamConfig::from(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<(usize, usize)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(v, p)| (0..p.len()).map(move |t| (v, t)))
        .collect();
    let mut history = Vec::new();
    let mut epoch = 0;
    let done = |steps: usize, epoch: usize| match cfg.max_steps {
        Some(n) => steps >= n,
        None => epoch >= cfg.epochs,
    };
    while !done(history.len(), epoch) {
        order.shuffle(&mut rng);
        let samples: Vec<TrainingSample> = order
            .iter()
            .map(|&(v, t)| {
                let (h, w) = dims[v];
                let y = rng.random_range(0..=h - cfg.crop);
                let x = rng.random_range(0..=w - cfg.crop);
                make_sample(&dataset[v], v, t, mc.n_back, mc.n_forward, cfg.crop, (y, x))
            })
            .collect::<Result<_>>()?;
        for batch in samples.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|n| history.len() >= n) {
                break;
            }
            let results: Vec<_> = batch.par_iter().map(|s| sample_gradients(&model, cfg, s)).collect();
            let mut grads = Gradients::new(model.params.len());
            let mut sum = LossBreakdown::default();
            let mut stats = Vec::new();
            for (s, r) in batch.iter().zip(results) {
                let (b, g, st) = r?;
                if !b.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss is {} at step {} on video {} frame {}",
                        b.total,
                        history.len(),
                        s.video,
                        s.frame
                    )));
                }
                grads.merge(&g);
                sum.total += b.total;
                sum.charbonnier_sum += b.charbonnier_sum;
                sum.laplacian += b.laplacian;
                sum.l2 += b.l2;
                stats = st;
            }
            let n = batch.len() as f64;
            if batch.len() > 1 {
                grads.scale(1.0 / n as f32);
            }
            adam_step(&mut model.params, &grads, &mut adam, &adam_cfg)?;
            let record = LossRecord {
                step: history.len(),
                epoch,
                total: sum.total / n,
                charbonnier_sum: sum.charbonnier_sum / n,
                laplacian: sum.laplacian / n,
                l2: sum.l2 / n,
                output_channel_std: stats,
            };
            on_step(&record);
            history.push(record);
        }
        epoch += 1;
    }
    Ok(TrainOutcome { model, adam, history })
}

/// Mean loss over every window of the dataset using the top-left crop.
pub fn dataset_loss(dataset: &[VideoPair], model: &Model<f32>, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut sum = LossBreakdown::default();
    let mut n = 0usize;
    for (v, pair) in dataset.iter().enumerate() {
        check_crop(pair, cfg.crop)?;
        for t in 0..pair.len() {
            let s = make_sample(
                pair,
                v,
                t,
                model.config.n_back,
                model.config.n_forward,
                cfg.crop,
                (0, 0),
            )?;
            let b = sample_loss(model, cfg, &s)?;
            sum.total += b.total;
            sum.charbonnier_sum += b.charbonnier_sum;
            sum.laplacian += b.laplacian;
            sum.l2 += b.l2;
            n += 1;
        }
    }
    let n = n as f64;
    Ok(LossBreakdown {
        total: sum.total / n,
        charbonnier_sum: sum.charbonnier_sum / n,
        laplacian: sum.laplacian / n,
        l2: sum.l2 / n,
    })
}
