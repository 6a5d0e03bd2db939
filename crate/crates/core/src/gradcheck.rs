//! Finite-difference verification of the tape gradients.
//!
//! Analytic gradients come from [`Tape`]; numeric ones from central
//! differences evaluated with [`Eager`], both in `f64`. Near a kink (a leaky
//! ReLU or absolute difference changing sides between `x - h` and `x + h`)
//! the central difference is meaningless, so such probes are either
//! skipped or evaluated with every kink held on the side taken at `x`, the
//! branch whose derivative the tape computes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::architecture::{init_params, Model, ModelConfig};
use crate::autodiff::{Eager, Graph, Tape};
use crate::training::{sample_loss_g, SampleTargets, TrainConfig};
use crate::{Error, ParamId, ParamStore, Result, Tensor};

/// A scalar function of a parameter store, written once for any graph.
pub trait Objective {
    fn eval<G: Graph<f64>>(&self, g: &mut G) -> Result<G::Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementSelection {
    All,
    /// The largest-gradient element of each tensor plus random others, up
    /// to `count` per tensor.
    PerTensor {
        count: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KinkPolicy {
    /// Drop probes whose kink signature differs from the one at `x`.
    Skip,
    /// Hold every kink on its side at `x` while probing.
    Freeze,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub selection: ElementSelection,
    pub kinks: KinkPolicy,
    /// Initial step of Ridders' extrapolation, used to re-estimate elements
    /// whose central difference misses the tolerance. Needs
    /// [`KinkPolicy::Freeze`].
    pub extrapolate_from: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            selection: ElementSelection::All,
            kinks: KinkPolicy::Freeze,
            extrapolate_from: Some(1e-2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Probes that crossed a kink and were evaluated with it held.
    pub frozen_kinks: usize,
    /// Elements re-estimated by extrapolation.
    pub extrapolated: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Largest errors first, at most ten.
    pub worst: Vec<ElementCheck>,
    /// Parameters with at least one element above the tolerance.
    pub offenders: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }

    pub fn summary(&self) -> String {
        let worst = self
            .worst
            .first()
            .map(|w| {
                format!(
                    ", worst {}[{}] analytic {:e} numeric {:e}",
                    w.param, w.index, w.analytic, w.numeric
                )
            })
            .unwrap_or_default();
        format!(
            "max rel. error {:.3e} over {} elements ({} skipped, {} held at kinks, {} extrapolated){worst}",
            self.max_rel_error, self.checked, self.skipped_kinks, self.frozen_kinks, self.extrapolated
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn probe<O: Objective>(params: &ParamStore<f64>, obj: &O, sides: Option<&[Vec<bool>]>) -> Result<(f64, u64)> {
    let mut g = match sides {
        Some(s) => Eager::on_kink_sides(params, s),
        None => Eager::with_kink_signature(params),
    };
    let loss = scalar_loss(&mut g, obj)?;
    Ok((loss, g.kink_signature().unwrap_or_default()))
}

fn scalar_loss<O: Objective>(g: &mut Eager<'_, f64>, obj: &O) -> Result<f64> {
    let v = obj.eval(g)?;
    let value = g.value(&v);
    if value.len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("objective must be scalar, got {:?}", value.shape()),
        ));
    }
    let loss = value.item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {loss}")));
    }
    Ok(loss)
}

fn select(grad: &[f64], selection: ElementSelection, tensor: usize) -> Vec<usize> {
    match selection {
        ElementSelection::All => (0..grad.len()).collect(),
        ElementSelection::PerTensor { count, seed } => {
            if grad.len() <= count {
                return (0..grad.len()).collect();
            }
            let top = (0..grad.len())
                .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                .unwrap_or(0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(tensor as u64);
            let mut picked = vec![top];
            for i in sample(&mut rng, grad.len(), count).into_iter() {
                if picked.len() == count {
                    break;
                }
                if i != top {
                    picked.push(i);
                }
            }
            picked
        }
    }
}

/// Compares tape gradients with central differences for the selected
/// elements of every trainable tensor.
pub fn finite_difference_grad_check<O: Objective>(
    params: &ParamStore<f64>,
    obj: &O,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {}",
            cfg.step
        )));
    }
    if let Some(h) = cfg.extrapolate_from {
        if !(h > 0.0) || cfg.kinks != KinkPolicy::Freeze {
            return Err(Error::Config(format!(
                "extrapolation needs a positive step and frozen kinks, got {h} with {:?}",
                cfg.kinks
            )));
        }
    }
    let (loss, base_sig, sides) = {
        let mut g = Eager::recording_kink_sides(params);
        let loss = scalar_loss(&mut g, obj)?;
        (loss, g.kink_signature().unwrap_or_default(), g.take_kink_sides())
    };
    let held = (cfg.kinks == KinkPolicy::Freeze).then_some(&sides[..]);
    let grads = {
        let mut tape = Tape::new(params);
        let root = obj.eval(&mut tape)?;
        tape.backward(root)?
    };

    let mut work = params.clone();
    let mut checks = Vec::new();
    let mut skipped = 0;
    let mut frozen = 0;
    let mut extrapolated = 0;
    let ids: Vec<ParamId> = params.ids().filter(|&id| !params.is_frozen(id)).collect();
    for id in ids {
        let n = params.get(id).len();
        let zeros;
        let grad = match grads.get(id) {
            Some(g) => g.data(),
            None => {
                zeros = vec![0.0; n];
                &zeros
            }
        };
        for i in select(grad, cfg.selection, id.0) {
            let x0 = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = x0 + cfg.step;
            let mut central = |h: f64| -> Result<(f64, bool)> {
                work.get_mut(id).data_mut()[i] = x0 + h;
                let (lp, sp) = probe(&work, obj, held)?;
                work.get_mut(id).data_mut()[i] = x0 - h;
                let (lm, sm) = probe(&work, obj, held)?;
                work.get_mut(id).data_mut()[i] = x0;
                Ok(((lp - lm) / (2.0 * h), sp != base_sig || sm != base_sig))
            };
            let (mut numeric, crossed) = central(cfg.step)?;
            if crossed {
                if held.is_none() {
                    skipped += 1;
                    continue;
                }
                frozen += 1;
            }
            if let Some(h) = cfg.extrapolate_from {
                if relative_error(grad[i], numeric) >= cfg.tolerance {
                    numeric = ridders(h, &mut central)?;
                    extrapolated += 1;
                }
            }
            checks.push(ElementCheck {
                param: params.name(id).to_string(),
                index: i,
                analytic: grad[i],
                numeric,
                rel_error: relative_error(grad[i], numeric),
            });
        }
    }

    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let mut offenders: Vec<String> = checks
        .iter()
        .filter(|c| c.rel_error >= cfg.tolerance)
        .map(|c| c.param.clone())
        .collect();
    offenders.dedup();
    let checked = checks.len();
    checks.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    checks.truncate(10);
    Ok(GradCheckReport {
        loss,
        checked,
        skipped_kinks: skipped,
        frozen_kinks: frozen,
        extrapolated,
        max_rel_error,
        tolerance: cfg.tolerance,
        worst: checks,
        offenders,
    })
}

/// Ridders' polynomial extrapolation of central differences to zero step.
fn ridders(initial: f64, central: &mut impl FnMut(f64) -> Result<(f64, bool)>) -> Result<f64> {
    const SHRINK: f64 = 1.4;
    const ROWS: usize = 10;
    let mut h = initial;
    let mut table = vec![vec![0.0; ROWS]; ROWS];
    table[0][0] = central(h)?.0;
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..ROWS {
        h /= SHRINK;
        table[0][i] = central(h)?.0;
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok(best)
}

/// Full training objective of one window: forward pass and every loss term.
pub struct ModelObjective<'a> {
    pub model: &'a Model<f64>,
    pub train: &'a TrainConfig,
    pub window: Tensor<f64>,
    pub targets: SampleTargets<f64>,
}

impl Objective for ModelObjective<'_> {
    fn eval<G: Graph<f64>>(&self, g: &mut G) -> Result<G::Var> {
        Ok(sample_loss_g(g, self.model, self.train, &self.window, &self.targets)?
            .0
            .total)
    }
}

/// Reduced model of the given configuration on a random `size` x `size`
/// window with random targets in [-1, 1].
pub struct ModelCheckSetup {
    pub model: Model<f64>,
    pub train: TrainConfig,
    pub window: Tensor<f64>,
    pub clean_window: Tensor<f64>,
    pub clean_current: Tensor<f64>,
}

impl ModelCheckSetup {
    pub fn new(config: &ModelConfig, size: usize, seed: u64) -> Result<Self> {
        use rand::Rng;
        let model = init_params::<f64>(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let c = config.input_channels();
        let mut rand_img = |ch: usize| Tensor::from_fn(&[ch, size, size], |_| rng.random_range(-0.9..0.9));
        let window = rand_img(c);
        let clean_window = rand_img(c);
        let central = config.central_channels();
        let clean_current = clean_window.slice_channels(central.start, central.end);
        let train = TrainConfig {
            crop: size,
            ..TrainConfig::default()
        };
        Ok(ModelCheckSetup {
            model,
            train,
            window,
            clean_window,
            clean_current,
        })
    }

    pub fn run(&self, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        let targets = SampleTargets::new(&self.model.config, &self.train, &self.clean_window, &self.clean_current)?;
        let obj = ModelObjective {
            model: &self.model,
            train: &self.train,
            window: self.window.clone(),
            targets,
        };
        finite_difference_grad_check(&self.model.params, &obj, cfg)
    }
}

/// Reduced model used by the command line and the acceptance suite.
pub fn reduced_model_config() -> ModelConfig {
    ModelConfig {
        n_back: 1,
        n_forward: 1,
        scales: 2,
        channels: 8,
        ..ModelConfig::default()
    }
}
