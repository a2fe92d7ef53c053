//! Multi-step, reconstruction and latent-consistency objective; single-model
//! and ensemble training loops.

use crate::error::{Error, Result};
use crate::model::{Evolution, LossFlavor, ModelConfig, RolloutMode, SurrogateModel};
use crate::pde::BundledWindow;
use crate::seed;
use crate::tensor::{AdamState, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// α_m for rollout steps m = 1..M.
    pub alpha: Vec<f64>,
    pub multi_step: bool,
    pub reconstruction: bool,
    pub consistency: bool,
}

impl LossWeights {
    /// α = (1, 0.1, 0.1, …) over `horizon` steps, all terms on.
    pub fn standard(horizon: usize) -> Self {
        let alpha = (0..horizon).map(|m| if m == 0 { 1.0 } else { 0.1 }).collect();
        LossWeights {
            alpha,
            multi_step: true,
            reconstruction: true,
            consistency: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.alpha.first() {
            Some(&a) if a > 0.0 => {}
            _ => return Err(Error::config("α_1 must be positive")),
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::config("all α_m must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, cosine-decayed to `lr_min` over the run.
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub ensemble: usize,
    pub loss: LossFlavor,
    /// Loss above this (or non-finite) aborts training.
    pub divergence_threshold: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            lr_min: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            ensemble: 1,
            loss: LossFlavor::Nll,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be ≥ 1"));
        }
        if self.ensemble == 0 {
            return Err(Error::config("ensemble size must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be ≥ 1"));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(Error::config("need 0 ≤ lr_min ≤ lr and lr > 0"));
        }
        Ok(())
    }

    /// Cosine schedule value at optimizer step `t` of `total`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr;
        }
        let frac = t as f64 / (total - 1) as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Per-term loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub multi_step: f64,
    pub reconstruction: f64,
    pub consistency: f64,
}

/// Graph handles for the loss terms. `point` is the part of `multi` that the
/// mean path alone produces; `sigma` is the σ-head likelihood on a detached
/// mean (present only for point-loss flavors of σ models).
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub multi: Option<Var>,
    pub point: Option<Var>,
    pub sigma: Option<Var>,
    pub reconstruction: Option<Var>,
    pub consistency: Option<Var>,
}

/// Stacked window batch.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// `[B, history, N, N]`
    pub input: Tensor,
    /// `[B, horizon·S, N, N]`
    pub target: Tensor,
    /// Input blocks shifted by m = 1..horizon bundles, each `[B, history, N, N]`.
    pub shifted: Vec<Tensor>,
    pub horizon: usize,
    pub bundle: usize,
}

impl WindowBatch {
    pub fn new(windows: &[&BundledWindow]) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::contract("empty window batch"))?;
        let horizon = first.horizon();
        let bundle = first.bundle;
        if windows
            .iter()
            .any(|w| w.horizon() != horizon || w.bundle != bundle || w.input.shape() != first.input.shape())
        {
            return Err(Error::contract("windows in one batch must share their geometry"));
        }
        let stack = |f: &dyn Fn(&BundledWindow) -> Tensor| -> Result<Tensor> {
            Tensor::stack(&windows.iter().map(|w| f(w)).collect::<Vec<_>>())
        };
        Ok(WindowBatch {
            input: stack(&|w| w.input.clone())?,
            target: stack(&|w| w.target.clone())?,
            shifted: (1..=horizon)
                .map(|m| stack(&|w| w.shifted_input(m)))
                .collect::<Result<_>>()?,
            horizon,
            bundle,
        })
    }

    pub fn len(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn gaussian_nll(g: &mut Graph, mean: Var, sigma: Var, target: Var) -> Result<Var> {
    let d = g.sub(target, mean)?;
    let d2 = g.square(d)?;
    let s2 = g.square(sigma)?;
    let r = g.div(d2, s2)?;
    let r = g.scale(r, 0.5)?;
    let ls = g.log(sigma)?;
    let e = g.add(r, ls)?;
    let m = g.mean(e)?;
    g.add_scalar(m, HALF_LN_2PI)
}

fn point_loss(g: &mut Graph, flavor: LossFlavor, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let e = match flavor {
        LossFlavor::L1 => g.abs(d)?,
        LossFlavor::Mse | LossFlavor::Nll => g.square(d)?,
    };
    g.mean(e)
}

fn accumulate(g: &mut Graph, acc: Option<Var>, term: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => g.add(a, term)?,
        None => term,
    }))
}

fn attribute(term: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { context } => Error::Numeric {
            context: format!("{term} loss: {context}"),
        },
        other => other,
    }
}

/// Builds the three-term objective for `batch` on `g`, with the model bound as `b`.
pub fn loss_graph(
    model: &SurrogateModel,
    g: &mut Graph,
    b: &crate::model::Bound,
    batch: &WindowBatch,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let cfg = model.config();
    let m_steps = batch.horizon;
    if m_steps > weights.alpha.len() {
        return Err(Error::contract(format!(
            "window horizon {m_steps} exceeds the {} configured α weights",
            weights.alpha.len()
        )));
    }
    if batch.bundle != cfg.bundle {
        return Err(Error::contract("window bundling differs from the model's"));
    }
    let flavor = cfg.loss;
    let sb = cfg.bundle;
    let hs = cfg.input_frames();
    let input = g.constant(batch.input.clone());
    let target = g.constant(batch.target.clone());

    let first = model.encode_var(g, b, input)?;
    let steps = model.rollout_from_var(g, b, input, Some(first), None, m_steps, RolloutMode::Autoregressive, None)?;

    let mut multi = None;
    let mut point = None;
    let mut sigma_part = None;
    if weights.multi_step {
        for (m, step) in steps.iter().enumerate() {
            let alpha = weights.alpha[m];
            if alpha == 0.0 {
                continue;
            }
            let y = g.slice_channels(target, m * sb, (m + 1) * sb)?;
            match (flavor, step.sigma) {
                (LossFlavor::Nll, Some(sig)) => {
                    let l = gaussian_nll(g, step.mean, sig, y).map_err(attribute("multi-step"))?;
                    let l = g.scale(l, alpha)?;
                    multi = accumulate(g, multi, l)?;
                }
                (LossFlavor::Nll, None) => {
                    return Err(Error::config("the nll loss needs a sigma head"));
                }
                (_, sig) => {
                    let l = point_loss(g, flavor, step.mean, y).map_err(attribute("multi-step"))?;
                    let l = g.scale(l, alpha)?;
                    point = accumulate(g, point, l)?;
                    multi = accumulate(g, multi, l)?;
                    if let Some(sig) = sig {
                        let mean = g.detach(step.mean);
                        let l = gaussian_nll(g, mean, sig, y).map_err(attribute("uncertainty"))?;
                        let l = g.scale(l, alpha)?;
                        sigma_part = accumulate(g, sigma_part, l)?;
                        multi = accumulate(g, multi, l)?;
                    }
                }
            }
        }
    }

    let reconstruction = if weights.reconstruction {
        let rec = model.decode_state_var(g, b, first.z)?;
        let last = g.slice_channels(input, hs - sb, hs)?;
        Some(point_loss(g, flavor, rec, last).map_err(attribute("reconstruction"))?)
    } else {
        None
    };

    let consistency = if weights.consistency && cfg.variant.evolution == Evolution::Latent {
        // Target encodings carry no gradient, so they are evaluated off-tape.
        let mut tg = Graph::new();
        let tb = model.bind(&mut tg, false);
        let mut acc = None;
        for (m, step) in steps.iter().enumerate() {
            let shifted = tg.constant(batch.shifted[m].clone());
            let zt = model.encode_var(&mut tg, &tb, shifted)?.z;
            let zt = g.constant(tg.value(zt).clone());
            let d = g.sub(step.latent.z, zt)?;
            let d2 = g.square(d)?;
            let num = g.sum_per_sample(d2)?;
            let t2 = g.square(zt)?;
            let den = g.sum_per_sample(t2)?;
            let den = g.add_scalar(den, 1e-12)?;
            let r = g.div(num, den).map_err(attribute("consistency"))?;
            let r = g.mean(r)?;
            acc = accumulate(g, acc, r)?;
        }
        acc
    } else {
        None
    };

    let mut total = None;
    for t in [multi, reconstruction, consistency].into_iter().flatten() {
        total = accumulate(g, total, t)?;
    }
    let total = match total {
        Some(t) => t,
        None => return Err(Error::config("every loss term is disabled")),
    };
    Ok(LossVars {
        total,
        multi,
        point,
        sigma: sigma_part,
        reconstruction,
        consistency,
    })
}

fn breakdown(g: &Graph, l: &LossVars) -> LossBreakdown {
    let v = |x: Option<Var>| x.map(|x| g.value(x).item()).unwrap_or(0.0);
    LossBreakdown {
        total: g.value(l.total).item(),
        multi_step: v(l.multi),
        reconstruction: v(l.reconstruction),
        consistency: v(l.consistency),
    }
}

/// Loss value and per-term breakdown on a set of windows (one batch).
pub fn compute_loss(model: &SurrogateModel, windows: &[&BundledWindow], weights: &LossWeights) -> Result<LossBreakdown> {
    let batch = WindowBatch::new(windows)?;
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let l = loss_graph(model, &mut g, &b, &batch, weights)?;
    Ok(breakdown(&g, &l))
}

/// Loss breakdown and the gradient of the total w.r.t. every parameter, in store order.
pub fn loss_and_gradients(
    model: &SurrogateModel,
    batch: &WindowBatch,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let l = loss_graph(model, &mut g, &b, batch, weights)?;
    let mut grads = g.backward(l.total)?;
    let out = b.vars().iter().map(|&v| grads.take(v)).collect();
    Ok((breakdown(&g, &l), out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: SurrogateModel,
    pub history: Vec<EpochRecord>,
}

/// Trains one model with Adam; shuffling and initialization derive from `cfg.seed`.
pub fn train_model(windows: &[BundledWindow], cfg: &TrainRunConfig, mcfg: &ModelConfig) -> Result<TrainedModel> {
    train_model_with(windows, cfg, mcfg, &LossWeights::standard(mcfg.horizon))
}

pub fn train_model_with(
    windows: &[BundledWindow],
    cfg: &TrainRunConfig,
    mcfg: &ModelConfig,
    weights: &LossWeights,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::config("no training windows"));
    }
    let mut mcfg = mcfg.clone();
    mcfg.loss = cfg.loss;
    mcfg.validate()?;
    for w in windows {
        if w.input.shape()[0] != mcfg.input_frames() || w.bundle != mcfg.bundle || w.grid() != mcfg.grid {
            return Err(Error::config(format!(
                "window geometry [{} frames, S={}, N={}] does not fit the model [{} frames, S={}, N={}]",
                w.input.shape()[0],
                w.bundle,
                w.grid(),
                mcfg.input_frames(),
                mcfg.bundle,
                mcfg.grid
            )));
        }
        if w.horizon() > mcfg.horizon {
            return Err(Error::config(format!(
                "window horizon {} exceeds the training horizon {}",
                w.horizon(),
                mcfg.horizon
            )));
        }
    }

    let mut model = SurrogateModel::new(mcfg, cfg.seed)?;
    let mut adam = AdamState::new(cfg.lr);
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    adam.eps = cfg.eps;
    let per_epoch = windows.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut t = 0;

    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(seed::derive_indexed(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&BundledWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = WindowBatch::new(&refs)?;
            let (l, grads) = match loss_and_gradients(&model, &batch, weights) {
                Ok(v) => v,
                Err(Error::Numeric { .. }) => return Err(Error::Divergence { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !l.total.is_finite() || l.total > cfg.divergence_threshold {
                return Err(Error::Divergence { epoch, loss: l.total });
            }
            lr = cfg.lr_at(t, total_steps);
            adam.lr = lr;
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            let mut params: Vec<&mut [f64]> = model.params_mut().tensors_mut().iter_mut().map(|p| p.data_mut()).collect();
            adam.step(&mut params, &grad_refs)?;
            t += 1;
            let w = chunk.len() as f64;
            sums.total += l.total * w;
            sums.multi_step += l.multi_step * w;
            sums.reconstruction += l.reconstruction * w;
            sums.consistency += l.consistency * w;
        }
        let n = windows.len() as f64;
        let mean = LossBreakdown {
            total: sums.total / n,
            multi_step: sums.multi_step / n,
            reconstruction: sums.reconstruction / n,
            consistency: sums.consistency / n,
        };
        log::debug!("epoch {epoch}: loss {:.5}", mean.total);
        history.push(EpochRecord { epoch, lr, loss: mean });
    }
    Ok(TrainedModel { model, history })
}

/// K independent trainings with seeds `seed + k`, run concurrently.
pub fn train_ensemble(windows: &[BundledWindow], cfg: &TrainRunConfig, mcfg: &ModelConfig) -> Result<Vec<TrainedModel>> {
    cfg.validate()?;
    (0..cfg.ensemble)
        .into_par_iter()
        .map(|k| {
            let member = TrainRunConfig {
                seed: cfg.seed.wrapping_add(k as u64),
                ensemble: 1,
                ..cfg.clone()
            };
            train_model(windows, &member, mcfg).map_err(|e| Error::Member {
                index: k,
                source: Box::new(e),
            })
        })
        .collect()
}
