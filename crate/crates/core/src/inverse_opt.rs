//! Recovering an initial state (and optionally the static parameter) from
//! later observations by differentiating through a frozen surrogate.

use crate::error::{Error, Result};
use crate::model::{LatentState, LatentVars, RolloutMode, SurrogateModel};
use crate::tensor::{AdamState, Graph, Tensor, Var};
use crate::uq_eval::{ensemble_aggregate, CalibrationReport, PredictiveSet, DEFAULT_BINS, SIGMA_MIN};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseTarget {
    InitialState,
    StaticParam,
    Both,
}

impl std::str::FromStr for InverseTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "initial_state" => Ok(InverseTarget::InitialState),
            "static_param" => Ok(InverseTarget::StaticParam),
            "both" => Ok(InverseTarget::Both),
            other => Err(Error::config(format!(
                "unknown inversion target {other:?} (initial_state, static_param, both)"
            ))),
        }
    }
}

impl InverseTarget {
    fn state(self) -> bool {
        matches!(self, InverseTarget::InitialState | InverseTarget::Both)
    }

    fn param(self) -> bool {
        matches!(self, InverseTarget::StaticParam | InverseTarget::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseRoute {
    /// Optimize (z⁰, z⁰_σ) and decode.
    Latent,
    /// Optimize the input pixel block directly.
    Input,
}

impl std::str::FromStr for InverseRoute {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(InverseRoute::Latent),
            "input" => Ok(InverseRoute::Input),
            other => Err(Error::config(format!("unknown inversion route {other:?} (latent, input)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseProblem {
    /// Observed bundles U^m for m = k_start..=k_end, `[k_end − k_start + 1, S, N, N]`.
    pub observations: Tensor,
    pub k_start: usize,
    pub k_end: usize,
    pub target: InverseTarget,
    pub iterations: usize,
    pub lr: f64,
    /// Starting input block `[history·S, N, N]`; defaults to the earliest
    /// observation tiled across the history window.
    pub initial_guess: Option<Tensor>,
    /// Known static parameter, or the starting point when it is optimized.
    pub static_param: Option<Vec<f64>>,
    /// Ground-truth U⁰ `[S, N, N]` for scoring the recovered field.
    pub truth: Option<Tensor>,
}

impl InverseProblem {
    /// Defaults: initial state only, 500 Adam iterations at lr 1e-2.
    pub fn new(observations: Tensor, k_start: usize, k_end: usize) -> Self {
        InverseProblem {
            observations,
            k_start,
            k_end,
            target: InverseTarget::InitialState,
            iterations: 500,
            lr: 1e-2,
            initial_guess: None,
            static_param: None,
            truth: None,
        }
    }

    pub fn validate(&self, model: &SurrogateModel) -> Result<()> {
        let cfg = model.config();
        if self.k_start < 1 || self.k_end < self.k_start {
            return Err(Error::config("inversion window needs 1 ≤ k_start ≤ k_end"));
        }
        if self.iterations == 0 {
            return Err(Error::config("inversion budget must be ≥ 1 iteration"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("inversion lr must be positive"));
        }
        let k = self.k_end - self.k_start + 1;
        let want = [k, cfg.bundle, cfg.grid, cfg.grid];
        if self.observations.shape() != want {
            return Err(Error::Dimension {
                op: "inverse_problem",
                lhs: self.observations.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        if let Some(g) = &self.initial_guess {
            let want = [cfg.input_frames(), cfg.grid, cfg.grid];
            if g.shape() != want {
                return Err(Error::Dimension {
                    op: "initial_guess",
                    lhs: g.shape().to_vec(),
                    rhs: want.to_vec(),
                });
            }
        }
        if self.target.param() && cfg.param_dim == 0 {
            return Err(Error::config("model has no static parameter to invert"));
        }
        if cfg.param_dim > 0 && self.static_param.as_ref().map(Vec::len) != Some(cfg.param_dim) {
            return Err(Error::config(format!("model needs a static parameter of width {}", cfg.param_dim)));
        }
        Ok(())
    }

    fn observation(&self, m: usize) -> Tensor {
        let len = self.observations.numel() / (self.k_end - self.k_start + 1);
        let mut shape = vec![1];
        shape.extend_from_slice(&self.observations.shape()[1..]);
        let i = m - self.k_start;
        Tensor::new(shape, self.observations.data()[i * len..(i + 1) * len].to_vec()).expect("slice of a valid tensor")
    }

    /// The starting input block `[1, history·S, N, N]`.
    pub fn start_block(&self, model: &SurrogateModel) -> Result<Tensor> {
        let cfg = model.config();
        let n = cfg.grid;
        let data = match &self.initial_guess {
            Some(g) => g.data().to_vec(),
            None => {
                let first = self.observation(self.k_start);
                first.data().repeat(cfg.history)
            }
        };
        Tensor::new(vec![1, cfg.input_frames(), n, n], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberSolution {
    /// Best latent iterate (latent route) or the encoding of the best input block.
    pub latent: LatentState,
    /// Recovered U⁰ `[S, N, N]`.
    pub field: Tensor,
    /// Predicted σ for the recovered field when the model has a σ head (latent route).
    pub field_sigma: Option<Tensor>,
    pub param: Option<Vec<f64>>,
    /// Objective before each update, then after the last one.
    pub trace: Vec<f64>,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Number of optimized scalars.
    pub dimension: usize,
}

#[derive(Debug, Clone)]
pub struct InverseSolution {
    pub route: InverseRoute,
    pub members: Vec<MemberSolution>,
    /// `(member index, error message)` for members that failed.
    pub failures: Vec<(usize, String)>,
    pub mean: Tensor,
    pub sigma: Tensor,
    pub report: Option<CalibrationReport>,
}

/// Σ_m ‖h_μ(g^m(·)) − U^m‖² over the observation window, from `latent`.
fn latent_objective(
    model: &SurrogateModel,
    g: &mut Graph,
    b: &crate::model::Bound,
    mut latent: LatentVars,
    zp: Option<Var>,
    prob: &InverseProblem,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for m in 1..=prob.k_end {
        latent = model.evolve_var(g, b, latent, zp)?;
        if m < prob.k_start {
            continue;
        }
        let pred = model.decode_state_var(g, b, latent.z)?;
        let obs = g.constant(prob.observation(m));
        let d = g.sub(pred, obs)?;
        let d2 = g.square(d)?;
        let s = g.sum(d2)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("k_end ≥ k_start ≥ 1"))
}

fn input_objective(
    model: &SurrogateModel,
    g: &mut Graph,
    b: &crate::model::Bound,
    block: Var,
    zp: Option<Var>,
    prob: &InverseProblem,
) -> Result<Var> {
    let steps = model.rollout_var(g, b, block, zp, prob.k_end, RolloutMode::Autoregressive, None)?;
    let mut total: Option<Var> = None;
    for m in prob.k_start..=prob.k_end {
        let obs = g.constant(prob.observation(m));
        let d = g.sub(steps[m - 1].mean, obs)?;
        let d2 = g.square(d)?;
        let s = g.sum(d2)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("k_end ≥ k_start ≥ 1"))
}

/// Optimization variables: one flat buffer per optimized quantity.
struct Vars {
    bufs: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl Vars {
    fn leaves(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.bufs
            .iter()
            .zip(&self.shapes)
            .map(|(d, s)| Ok(g.leaf(Tensor::new(s.clone(), d.clone())?.with_grad())))
            .collect()
    }

    fn dimension(&self) -> usize {
        self.bufs.iter().map(Vec::len).sum()
    }
}

/// Adam with best-iterate return. `eval` builds the objective from leaves
/// created for the current iterate.
fn optimize(
    mut vars: Vars,
    prob: &InverseProblem,
    eval: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<(Vars, Vec<f64>)> {
    let mut adam = AdamState::new(prob.lr);
    let mut trace = Vec::with_capacity(prob.iterations + 1);
    let mut best = (f64::INFINITY, vars.bufs.clone());
    for it in 0..=prob.iterations {
        let mut g = Graph::new();
        let leaves = vars.leaves(&mut g)?;
        let obj = eval(&mut g, &leaves).map_err(|e| match e {
            Error::Numeric { context } => Error::Numeric {
                context: format!("inversion iteration {it}: {context}"),
            },
            other => other,
        })?;
        let value = g.value(obj).item();
        if !value.is_finite() {
            return Err(Error::numeric(format!("inversion objective at iteration {it}")));
        }
        trace.push(value);
        if value < best.0 {
            best = (value, vars.bufs.clone());
        }
        if it == prob.iterations {
            break;
        }
        let grads = g.backward(obj).map_err(|e| match e {
            Error::Numeric { context } => Error::Numeric {
                context: format!("inversion iteration {it}: {context}"),
            },
            other => other,
        })?;
        let gs: Vec<Vec<f64>> = leaves.iter().map(|&v| grads.get(v)).collect();
        let grefs: Vec<&[f64]> = gs.iter().map(Vec::as_slice).collect();
        let mut prefs: Vec<&mut [f64]> = vars.bufs.iter_mut().map(Vec::as_mut_slice).collect();
        adam.step(&mut prefs, &grefs)?;
    }
    vars.bufs = best.1;
    Ok((vars, trace))
}

fn param_var(g: &mut Graph, model: &SurrogateModel, b: &crate::model::Bound, p: Option<Var>) -> Result<Option<Var>> {
    model.encode_static_var(g, b, p)
}

/// Latent route: Adam on (z⁰, z⁰_σ) (and p̂ if requested), then decode h_μ(z⁰).
pub fn invert_initial_state(model: &SurrogateModel, prob: &InverseProblem) -> Result<MemberSolution> {
    prob.validate(model)?;
    let cfg = model.config();
    let d = cfg.latent_dim;
    let start = model.encode(&prob.start_block(model)?)?;
    let mut vars = Vars {
        bufs: Vec::new(),
        shapes: Vec::new(),
    };
    // slot layout: [z, z_σ?, p?]
    let optimize_state = prob.target.state();
    let has_zs = start.z_sigma.is_some() && cfg.variant.propagates_zsigma();
    if optimize_state {
        vars.bufs.push(start.z.clone());
        vars.shapes.push(vec![1, d]);
        if has_zs {
            vars.bufs.push(start.z_sigma.clone().expect("checked"));
            vars.shapes.push(vec![1, d]);
        }
    }
    let p0 = prob.static_param.clone();
    if prob.target.param() {
        let p = p0.clone().expect("validated");
        vars.shapes.push(vec![1, p.len()]);
        vars.bufs.push(p);
    }

    let fixed_latent = start.clone();
    let eval = |g: &mut Graph, leaves: &[Var]| -> Result<Var> {
        let b = model.bind(g, false);
        let mut i = 0;
        let latent = if optimize_state {
            let z = leaves[0];
            i = 1;
            let z_sigma = if has_zs {
                i = 2;
                Some(leaves[1])
            } else {
                None
            };
            LatentVars { z, z_sigma }
        } else {
            let z = g.constant(Tensor::new(vec![1, d], fixed_latent.z.clone())?);
            LatentVars { z, z_sigma: None }
        };
        let p = if prob.target.param() {
            Some(leaves[i])
        } else {
            match &p0 {
                Some(p) => Some(g.constant(Tensor::new(vec![1, p.len()], p.clone())?)),
                None => None,
            }
        };
        let zp = param_var(g, model, &b, p)?;
        latent_objective(model, g, &b, latent, zp, prob)
    };
    let dimension = vars.dimension();
    let (vars, trace) = optimize(vars, prob, eval)?;

    let mut latent = start;
    let mut slot = 0;
    if optimize_state {
        latent.z = vars.bufs[0].clone();
        slot = 1;
        if has_zs {
            latent.z_sigma = Some(vars.bufs[1].clone());
            slot = 2;
        }
    }
    let param = if prob.target.param() {
        Some(vars.bufs[slot].clone())
    } else {
        p0
    };
    let field = model.decode_state(&latent)?;
    let field_sigma = if cfg.variant.with_sigma() {
        Some(model.decode_uncertainty(&latent)?)
    } else {
        None
    };
    Ok(MemberSolution {
        latent,
        field,
        field_sigma,
        param,
        initial_objective: trace[0],
        final_objective: trace.iter().copied().fold(f64::INFINITY, f64::min),
        trace,
        dimension,
    })
}

/// Input route: Adam directly on the `[history·S, N, N]` pixel block.
pub fn invert_input_space(model: &SurrogateModel, prob: &InverseProblem) -> Result<MemberSolution> {
    prob.validate(model)?;
    let cfg = model.config();
    let block = prob.start_block(model)?;
    let vars = Vars {
        shapes: vec![block.shape().to_vec()],
        bufs: vec![block.into_data()],
    };
    let p0 = prob.static_param.clone();
    let eval = |g: &mut Graph, leaves: &[Var]| -> Result<Var> {
        let b = model.bind(g, false);
        let p = match &p0 {
            Some(p) => Some(g.constant(Tensor::new(vec![1, p.len()], p.clone())?)),
            None => None,
        };
        let zp = param_var(g, model, &b, p)?;
        input_objective(model, g, &b, leaves[0], zp, prob)
    };
    let dimension = vars.dimension();
    let (vars, trace) = optimize(vars, prob, eval)?;
    let n = cfg.grid;
    let hs = cfg.input_frames();
    let sb = cfg.bundle;
    let best = Tensor::new(vec![hs, n, n], vars.bufs[0].clone())?;
    let field = Tensor::new(vec![sb, n, n], best.data()[(hs - sb) * n * n..].to_vec())?;
    let latent = model.encode(&best)?;
    Ok(MemberSolution {
        latent,
        field,
        field_sigma: None,
        param: p0,
        initial_objective: trace[0],
        final_objective: trace.iter().copied().fold(f64::INFINITY, f64::min),
        trace,
        dimension,
    })
}

/// Per-member inversion plus ensemble aggregation of the recovered fields.
pub fn inverse_uq(members: &[SurrogateModel], prob: &InverseProblem, route: InverseRoute) -> Result<InverseSolution> {
    if members.is_empty() {
        return Err(Error::contract("inverse_uq needs at least one member"));
    }
    let results: Vec<Result<MemberSolution>> = members
        .par_iter()
        .map(|m| match route {
            InverseRoute::Latent => invert_initial_state(m, prob),
            InverseRoute::Input => invert_input_space(m, prob),
        })
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => ok.push(s),
            Err(e) => {
                log::warn!("inversion member {i} failed: {e}");
                failures.push((i, e.to_string()));
            }
        }
    }
    if ok.is_empty() {
        let (index, msg) = failures.first().cloned().expect("members non-empty");
        return Err(Error::Member {
            index,
            source: Box::new(Error::Numeric { context: msg }),
        });
    }
    let zeros = vec![0.0; ok[0].field.numel()];
    let pairs: Vec<(&[f64], &[f64])> = ok
        .iter()
        .map(|s| {
            let sig = s.field_sigma.as_ref().map(|t| t.data()).unwrap_or(&zeros);
            (s.field.data(), sig)
        })
        .collect();
    let (mu, sigma) = ensemble_aggregate(&pairs, SIGMA_MIN)?;
    let shape = ok[0].field.shape().to_vec();
    let report = match &prob.truth {
        Some(t) => {
            let mut ps = PredictiveSet::new(mu.clone(), sigma.clone(), t.data().to_vec())?;
            ps.provenance.variant = members[0].config().variant.to_string();
            Some(CalibrationReport::from_set(&ps, DEFAULT_BINS)?)
        }
        None => None,
    };
    Ok(InverseSolution {
        route,
        members: ok,
        failures,
        mean: Tensor::new(shape.clone(), mu)?,
        sigma: Tensor::new(shape, sigma)?,
        report,
    })
}
