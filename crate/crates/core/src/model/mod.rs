//! The surrogate network: dynamic encoder q, static encoder r, decoders h_μ
//! and h_σ, latent evolution g = (g_μ, g_σ), and multi-step rollout.
//!
//! Every forward routine comes in two forms. The `*_var` methods build onto a
//! caller-owned [`Graph`] so training and inversion can differentiate through
//! them; the plain methods wrap those for inference on concrete tensors.

mod config;

pub use config::{Evolution, LossFlavor, ModelConfig, Propagation, Uncertainty, Variant};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{load_params, save_params, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

const NORM_EPS: f64 = 1e-5;
const CHECKPOINT_FORMAT: &str = "leuq-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Autoregressive,
    TeacherForcing,
}

impl std::str::FromStr for RolloutMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autoregressive" | "ar" => Ok(RolloutMode::Autoregressive),
            "teacher_forcing" | "tf" => Ok(RolloutMode::TeacherForcing),
            other => Err(Error::config(format!(
                "unknown rollout mode {other:?} (autoregressive, teacher_forcing)"
            ))),
        }
    }
}

/// Latent pair for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub z_sigma: Option<Vec<f64>>,
}

/// Latent pair inside a graph; both parts are `[B, d_z]`.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub z: Var,
    pub z_sigma: Option<Var>,
}

/// One rollout step inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub latent: LatentVars,
    /// `[B, S, N, N]`
    pub mean: Var,
    pub sigma: Option<Var>,
}

/// One rollout step as tensors, with the batch axis kept if the input had one.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPrediction {
    pub mean: Tensor,
    pub sigma: Option<Tensor>,
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
    /// Leading layers followed by ELU.
    activated: usize,
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: Conv,
    blocks: Vec<(Conv, Norm)>,
    head: Linear,
}

#[derive(Debug, Clone)]
struct Decoder {
    proj: Linear,
    blocks: Vec<(Conv, Norm)>,
    out: Conv,
}

#[derive(Debug, Clone)]
struct Arch {
    encoder: Encoder,
    static_encoder: Option<Mlp>,
    decoder_mu: Decoder,
    decoder_sigma: Option<Decoder>,
    g_mu: Mlp,
    g_sigma: Option<Mlp>,
    /// no_zsigma: maps z to z_σ at every state.
    sigma_head: Option<Mlp>,
}

enum Init {
    /// N(0, gain/fan_in)
    Normal { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
}

/// Creates parameters either freshly initialized or looked up by name.
struct Builder {
    store: ParamStore,
    rng: Option<ChaCha8Rng>,
    source: Option<ParamStore>,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> Result<ParamId> {
        let t = match &self.source {
            Some(src) => {
                let t = src
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )));
                }
                t
            }
            None => {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal { fan_in, gain } => {
                        let std = (gain / fan_in as f64).sqrt();
                        let rng = self.rng.as_mut().expect("fresh builder has an rng");
                        (0..n)
                            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    }
                };
                Tensor::new(shape, data)?
            }
        };
        Ok(self.store.add(name, t))
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, gain: f64, zero: bool) -> Result<Linear> {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Normal { fan_in: din, gain }
        };
        Ok(Linear {
            w: self.param(format!("{name}.w"), vec![din, dout], init)?,
            b: self.param(format!("{name}.b"), vec![dout], Init::Zeros)?,
        })
    }

    /// `widths[0] → widths[1] → …`; ELU after the first `activated` layers.
    fn mlp(&mut self, name: &str, widths: &[usize], activated: usize, zero_last: bool) -> Result<Mlp> {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i < activated { 2.0 } else { 1.0 };
                self.linear(&format!("{name}.{i}"), widths[i], widths[i + 1], gain, zero_last && i + 1 == n)
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, activated })
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, gain: f64) -> Result<Conv> {
        Ok(Conv {
            w: self.param(
                format!("{name}.w"),
                vec![cout, cin, k, k],
                Init::Normal {
                    fan_in: cin * k * k,
                    gain,
                },
            )?,
            b: self.param(format!("{name}.b"), vec![cout], Init::Zeros)?,
            stride,
            pad,
        })
    }

    /// Weight layout `[cin, cout, k, k]`; each output pixel sees about
    /// `cin·(k/stride)²` inputs.
    fn conv_t(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, gain: f64) -> Result<Conv> {
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        Ok(Conv {
            w: self.param(format!("{name}.w"), vec![cin, cout, k, k], Init::Normal { fan_in, gain })?,
            b: self.param(format!("{name}.b"), vec![cout], Init::Zeros)?,
            stride,
            pad,
        })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.param(format!("{name}.gamma"), vec![c], Init::Ones)?,
            beta: self.param(format!("{name}.beta"), vec![c], Init::Zeros)?,
        })
    }

    fn decoder(&mut self, name: &str, cfg: &ModelConfig) -> Result<Decoder> {
        let plan = cfg.channel_plan();
        let f = cfg.conv_blocks;
        let s = cfg.bottleneck();
        let proj = self.linear(&format!("{name}.proj"), cfg.latent_dim, plan[f] * s * s, 1.0, false)?;
        let blocks = (0..f)
            .map(|j| {
                let (cin, cout) = (plan[f - j], plan[f - j - 1]);
                Ok((
                    self.conv_t(&format!("{name}.up{j}"), cin, cout, 4, 2, 1, 2.0)?,
                    self.norm(&format!("{name}.up{j}.norm"), cout)?,
                ))
            })
            .collect::<Result<_>>()?;
        let out = self.conv_t(&format!("{name}.out"), plan[0], cfg.bundle, 3, 1, 1, 1.0)?;
        Ok(Decoder { proj, blocks, out })
    }

    fn arch(&mut self, cfg: &ModelConfig) -> Result<Arch> {
        let plan = cfg.channel_plan();
        let f = cfg.conv_blocks;
        let s = cfg.bottleneck();
        let d = cfg.latent_dim;
        let dp = cfg.static_dim;
        let stem = self.conv("encoder.stem", cfg.input_frames(), plan[0], 3, 1, 1, 2.0)?;
        let blocks = (0..f)
            .map(|i| {
                Ok((
                    self.conv(&format!("encoder.down{i}"), plan[i], plan[i + 1], 4, 2, 1, 2.0)?,
                    self.norm(&format!("encoder.down{i}.norm"), plan[i + 1])?,
                ))
            })
            .collect::<Result<_>>()?;
        let head = self.linear("encoder.head", plan[f] * s * s, cfg.encoder_width(), 1.0, false)?;
        let encoder = Encoder { stem, blocks, head };

        let static_encoder = if cfg.param_dim > 0 && cfg.static_layers > 0 {
            let mut widths = vec![cfg.param_dim];
            widths.extend(std::iter::repeat_n(dp, cfg.static_layers));
            Some(self.mlp("static", &widths, cfg.static_layers - 1, false)?)
        } else {
            None
        };

        let decoder_mu = self.decoder("decoder_mu", cfg)?;
        let decoder_sigma = if cfg.variant.with_sigma() {
            Some(self.decoder("decoder_sigma", cfg)?)
        } else {
            None
        };
        let g_mu = self.mlp("g_mu", &[d + dp, d, d, d, d, d], 3, true)?;
        let g_sigma = if cfg.variant.with_sigma() {
            Some(self.mlp("g_sigma", &[2 * d + dp, d, d, d, d, d], 3, true)?)
        } else {
            None
        };
        let sigma_head = if cfg.variant.with_sigma() && !cfg.variant.propagates_zsigma() {
            Some(self.mlp("sigma_head", &[d, d, d, d, d, d], 3, false)?)
        } else {
            None
        };
        Ok(Arch {
            encoder,
            static_encoder,
            decoder_mu,
            decoder_sigma,
            g_mu,
            g_sigma,
            sigma_head,
        })
    }
}

/// Graph handles for every parameter of one model, indexed like its store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, id: &ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateModel {
    config: ModelConfig,
    params: ParamStore,
    arch: Arch,
}

impl SurrogateModel {
    /// Fresh model with weights drawn from a stream derived from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: Some(seed::rng(seed::derive_seed(seed, "model-init"))),
            source: None,
        };
        let arch = b.arch(&config)?;
        Ok(SurrogateModel {
            config,
            params: b.store,
            arch,
        })
    }

    /// Rebuilds a model around existing parameters, matched by name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = params.len();
        let mut b = Builder {
            store: ParamStore::new(),
            rng: None,
            source: Some(params),
        };
        let arch = b.arch(&config)?;
        if b.store.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint has {expected} tensors, config implies {}",
                b.store.len()
            )));
        }
        Ok(SurrogateModel {
            config,
            params: b.store,
            arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Parameter ids of the final layers of g_μ and g_σ.
    pub fn evolution_output_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for mlp in std::iter::once(&self.arch.g_mu).chain(self.arch.g_sigma.as_ref()) {
            let last = mlp.layers.last().expect("evolution MLP has layers");
            out.push(last.w);
            out.push(last.b);
        }
        out
    }

    /// Zeroes every weight and bias of g_μ and g_σ.
    pub fn zero_evolution(&mut self) {
        let mut ids = Vec::new();
        for mlp in std::iter::once(&self.arch.g_mu).chain(self.arch.g_sigma.as_ref()) {
            for l in &mlp.layers {
                ids.push(l.w);
                ids.push(l.b);
            }
        }
        for id in ids {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Parameter ids of the σ decoder (empty under deterministic variants).
    pub fn sigma_decoder_params(&self) -> Vec<ParamId> {
        let Some(d) = &self.arch.decoder_sigma else {
            return Vec::new();
        };
        let mut out = vec![d.proj.w, d.proj.b, d.out.w, d.out.b];
        for (c, n) in &d.blocks {
            out.extend([c.w, c.b, n.gamma, n.beta]);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config,
        });
        save_params(path, &self.params, meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (params, meta) = load_params(path)?;
        if meta.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Format("checkpoint does not hold a surrogate model".into()));
        }
        let version = meta.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        SurrogateModel::from_params(config, params)
    }

    /// Places all parameters on `g`; `trainable` decides whether they collect gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.requires_grad = trainable;
                g.leaf(t)
            })
            .collect();
        Bound { vars }
    }

    /// Binds only the latent evolution parameters, so a value-level step costs
    /// O(d_z²) regardless of grid size. Other slots share a scalar placeholder.
    fn bind_evolution(&self, g: &mut Graph) -> Bound {
        let placeholder = g.constant(Tensor::scalar(0.0));
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                if ["g_mu.", "g_sigma.", "sigma_head."].iter().any(|p| name.starts_with(p)) {
                    g.constant(t.clone())
                } else {
                    placeholder
                }
            })
            .collect();
        Bound { vars }
    }

    fn linear_var(g: &mut Graph, b: &Bound, l: &Linear, x: Var) -> Result<Var> {
        let y = g.matmul(x, b.get(&l.w))?;
        g.add_row_bias(y, b.get(&l.b))
    }

    fn mlp_var(g: &mut Graph, b: &Bound, mlp: &Mlp, mut x: Var) -> Result<Var> {
        for (i, l) in mlp.layers.iter().enumerate() {
            x = Self::linear_var(g, b, l, x)?;
            if i < mlp.activated {
                x = g.elu(x)?;
            }
        }
        Ok(x)
    }

    fn conv_var(g: &mut Graph, b: &Bound, c: &Conv, x: Var) -> Result<Var> {
        let y = g.conv2d(x, b.get(&c.w), c.stride, c.pad)?;
        g.add_channel_bias(y, b.get(&c.b))
    }

    fn conv_t_var(g: &mut Graph, b: &Bound, c: &Conv, x: Var) -> Result<Var> {
        let y = g.conv_transpose2d(x, b.get(&c.w), c.stride, c.pad)?;
        g.add_channel_bias(y, b.get(&c.b))
    }

    fn norm_var(&self, g: &mut Graph, b: &Bound, n: &Norm, x: Var) -> Result<Var> {
        g.group_norm(x, self.config.norm_groups, b.get(&n.gamma), b.get(&n.beta), NORM_EPS)
    }

    fn check_frames(&self, g: &Graph, u: Var, frames: usize, what: &'static str) -> Result<()> {
        let s = g.shape(u);
        let n = self.config.grid;
        if s.len() != 4 || s[1] != frames || s[2] != n || s[3] != n {
            return Err(Error::Dimension {
                op: what,
                lhs: s.to_vec(),
                rhs: vec![0, frames, n, n],
            });
        }
        Ok(())
    }

    fn sigma_head_var(&self, g: &mut Graph, b: &Bound, z: Var) -> Result<Option<Var>> {
        match &self.arch.sigma_head {
            Some(h) => Ok(Some(Self::mlp_var(g, b, h, z)?)),
            None => Ok(None),
        }
    }

    /// q: `[B, history·S, N, N]` → latent pair.
    pub fn encode_var(&self, g: &mut Graph, b: &Bound, u: Var) -> Result<LatentVars> {
        self.check_frames(g, u, self.config.input_frames(), "encode")?;
        let e = &self.arch.encoder;
        let mut x = Self::conv_var(g, b, &e.stem, u)?;
        x = g.elu(x)?;
        for (c, n) in &e.blocks {
            x = Self::conv_var(g, b, c, x)?;
            x = self.norm_var(g, b, n, x)?;
            x = g.elu(x)?;
        }
        let batch = g.shape(x)[0];
        let flat = g.value(x).numel() / batch;
        x = g.reshape(x, &[batch, flat])?;
        let h = Self::linear_var(g, b, &e.head, x)?;
        let d = self.config.latent_dim;
        if self.config.variant.propagates_zsigma() {
            Ok(LatentVars {
                z: g.slice_cols(h, 0, d)?,
                z_sigma: Some(g.slice_cols(h, d, 2 * d)?),
            })
        } else {
            let z_sigma = self.sigma_head_var(g, b, h)?;
            Ok(LatentVars { z: h, z_sigma })
        }
    }

    /// r: `[B, param_dim]` → `[B, static_dim]`; `None` when no static parameter is configured.
    pub fn encode_static_var(&self, g: &mut Graph, b: &Bound, p: Option<Var>) -> Result<Option<Var>> {
        let pd = self.config.param_dim;
        match (p, pd) {
            (None, 0) => Ok(None),
            (None, _) => Err(Error::contract(format!("model expects a static parameter of width {pd}"))),
            (Some(p), _) => {
                let s = g.shape(p);
                if s.len() != 2 || s[1] != pd {
                    return Err(Error::Dimension {
                        op: "encode_static",
                        lhs: s.to_vec(),
                        rhs: vec![0, pd],
                    });
                }
                match &self.arch.static_encoder {
                    Some(mlp) => Ok(Some(Self::mlp_var(g, b, mlp, p)?)),
                    None => Ok(Some(p)),
                }
            }
        }
    }

    /// One latent step. z' never reads z_σ.
    pub fn evolve_var(&self, g: &mut Graph, b: &Bound, s: LatentVars, zp: Option<Var>) -> Result<LatentVars> {
        let mu_in = match zp {
            Some(zp) => g.concat_cols(&[s.z, zp])?,
            None => s.z,
        };
        let dz = Self::mlp_var(g, b, &self.arch.g_mu, mu_in)?;
        let z = g.add(dz, s.z)?;
        let z_sigma = match (&self.arch.g_sigma, s.z_sigma) {
            (Some(gs), Some(zs)) if self.config.variant.propagates_zsigma() => {
                let mut parts = vec![s.z, zs];
                parts.extend(zp);
                let inp = g.concat_cols(&parts)?;
                let dzs = Self::mlp_var(g, b, gs, inp)?;
                Some(g.add(dzs, zs)?)
            }
            _ => self.sigma_head_var(g, b, z)?,
        };
        Ok(LatentVars { z, z_sigma })
    }

    fn decoder_var(&self, g: &mut Graph, b: &Bound, d: &Decoder, z: Var) -> Result<Var> {
        let batch = g.shape(z)[0];
        if g.shape(z) != [batch, self.config.latent_dim] {
            return Err(Error::Dimension {
                op: "decode",
                lhs: g.shape(z).to_vec(),
                rhs: vec![batch, self.config.latent_dim],
            });
        }
        let s = self.config.bottleneck();
        let top = *self.config.channel_plan().last().expect("non-empty plan");
        let mut x = Self::linear_var(g, b, &d.proj, z)?;
        x = g.reshape(x, &[batch, top, s, s])?;
        for (c, n) in &d.blocks {
            x = Self::conv_t_var(g, b, c, x)?;
            x = self.norm_var(g, b, n, x)?;
            x = g.elu(x)?;
        }
        Self::conv_t_var(g, b, &d.out, x)
    }

    /// h_μ: `[B, d_z]` → `[B, S, N, N]`.
    pub fn decode_state_var(&self, g: &mut Graph, b: &Bound, z: Var) -> Result<Var> {
        self.decoder_var(g, b, &self.arch.decoder_mu, z)
    }

    /// h_σ: `[B, d_z]` → `[B, S, N, N]`, every entry ≥ σ_min.
    pub fn decode_uncertainty_var(&self, g: &mut Graph, b: &Bound, z_sigma: Var) -> Result<Var> {
        let d = self
            .arch
            .decoder_sigma
            .as_ref()
            .ok_or_else(|| Error::contract("decode_uncertainty called on a deterministic model"))?;
        let x = self.decoder_var(g, b, d, z_sigma)?;
        let x = g.softplus(x)?;
        g.add_scalar(x, self.config.sigma_min)
    }

    fn decode_step(&self, g: &mut Graph, b: &Bound, latent: LatentVars) -> Result<StepVars> {
        let mean = self.decode_state_var(g, b, latent.z)?;
        let sigma = match latent.z_sigma {
            Some(zs) => Some(self.decode_uncertainty_var(g, b, zs)?),
            None => None,
        };
        Ok(StepVars { latent, mean, sigma })
    }

    /// Multi-step prediction from `init: [B, history·S, N, N]`.
    ///
    /// `truth` holds the future bundles `[B, ≥(steps−1)·S, N, N]` and is only
    /// read under teacher forcing.
    pub fn rollout_var(
        &self,
        g: &mut Graph,
        b: &Bound,
        init: Var,
        zp: Option<Var>,
        steps: usize,
        mode: RolloutMode,
        truth: Option<Var>,
    ) -> Result<Vec<StepVars>> {
        self.rollout_from_var(g, b, init, None, zp, steps, mode, truth)
    }

    /// [`Self::rollout_var`] reusing `first`, an existing encoding of `init`.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout_from_var(
        &self,
        g: &mut Graph,
        b: &Bound,
        init: Var,
        first: Option<LatentVars>,
        zp: Option<Var>,
        steps: usize,
        mode: RolloutMode,
        truth: Option<Var>,
    ) -> Result<Vec<StepVars>> {
        if steps == 0 {
            return Err(Error::contract("rollout needs at least one step"));
        }
        let cfg = &self.config;
        let hs = cfg.input_frames();
        let sb = cfg.bundle;
        self.check_frames(g, init, hs, "rollout")?;
        let truth = match (mode, truth) {
            (RolloutMode::Autoregressive, _) => None,
            (RolloutMode::TeacherForcing, None) => {
                return Err(Error::contract("teacher forcing needs the ground-truth sequence"))
            }
            (RolloutMode::TeacherForcing, Some(t)) => {
                let frames = g.shape(t)[1];
                if frames < (steps - 1) * sb {
                    return Err(Error::contract(format!(
                        "teacher forcing over {steps} steps needs {} truth frames, got {frames}",
                        (steps - 1) * sb
                    )));
                }
                Some(t)
            }
        };

        let mut out = Vec::with_capacity(steps);
        match (cfg.variant.evolution, truth) {
            (Evolution::Latent, None) => {
                let mut latent = match first {
                    Some(l) => l,
                    None => self.encode_var(g, b, init)?,
                };
                for _ in 0..steps {
                    latent = self.evolve_var(g, b, latent, zp)?;
                    out.push(self.decode_step(g, b, latent)?);
                }
            }
            (_, Some(t)) => {
                let full = g.concat_channels(&[init, t])?;
                for m in 0..steps {
                    let latent = match (m, first) {
                        (0, Some(l)) => l,
                        (0, None) => self.encode_var(g, b, init)?,
                        _ => {
                            let hist = g.slice_channels(full, m * sb, m * sb + hs)?;
                            self.encode_var(g, b, hist)?
                        }
                    };
                    let latent = self.evolve_var(g, b, latent, zp)?;
                    out.push(self.decode_step(g, b, latent)?);
                }
            }
            (Evolution::NoLatent, None) => {
                let mut hist = init;
                for m in 0..steps {
                    let latent = match (m, first) {
                        (0, Some(l)) => l,
                        _ => self.encode_var(g, b, hist)?,
                    };
                    let latent = self.evolve_var(g, b, latent, zp)?;
                    let step = self.decode_step(g, b, latent)?;
                    out.push(step);
                    if m + 1 < steps {
                        hist = if hs > sb {
                            let keep = g.slice_channels(hist, sb, hs)?;
                            g.concat_channels(&[keep, step.mean])?
                        } else {
                            g.slice_channels(step.mean, sb - hs, sb)?
                        };
                    }
                }
            }
        }
        Ok(out)
    }

    fn batched(t: &Tensor, rank: usize) -> Result<(Tensor, bool)> {
        match t.shape().len() {
            r if r == rank => Ok((t.clone(), false)),
            r if r + 1 == rank => {
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                Ok((t.clone().reshape(s)?, true))
            }
            _ => Err(Error::Dimension {
                op: "batch",
                lhs: t.shape().to_vec(),
                rhs: vec![rank],
            }),
        }
    }

    fn unbatch(t: &Tensor, squeeze: bool) -> Tensor {
        if squeeze {
            t.clone().reshape(t.shape()[1..].to_vec()).expect("same numel")
        } else {
            t.clone()
        }
    }

    fn static_vars(&self, g: &mut Graph, b: &Bound, p: Option<&[f64]>, batch: usize) -> Result<Option<Var>> {
        let p = match p {
            Some(p) => {
                let data = p.iter().copied().cycle().take(p.len() * batch).collect();
                Some(g.constant(Tensor::new(vec![batch, p.len().max(1)], data)?))
            }
            None => None,
        };
        self.encode_static_var(g, b, p)
    }

    /// q on a `[history·S, N, N]` block.
    pub fn encode(&self, u: &Tensor) -> Result<LatentState> {
        let (u, _) = Self::batched(u, 4)?;
        if u.shape()[0] != 1 {
            return Err(Error::contract("encode takes a single sample"));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let u = g.constant(u);
        let l = self.encode_var(&mut g, &b, u)?;
        Ok(LatentState {
            z: g.value(l.z).data().to_vec(),
            z_sigma: l.z_sigma.map(|v| g.value(v).data().to_vec()),
        })
    }

    pub fn encode_static(&self, p: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        if p.is_empty() {
            return if self.config.param_dim == 0 {
                Ok(Vec::new())
            } else {
                Err(Error::contract("empty static parameter"))
            };
        }
        let zp = self.static_vars(&mut g, &b, Some(p), 1)?;
        Ok(zp.map(|v| g.value(v).data().to_vec()).unwrap_or_default())
    }

    fn latent_vars(&self, g: &mut Graph, s: &LatentState) -> Result<LatentVars> {
        let d = self.config.latent_dim;
        let row = |g: &mut Graph, v: &[f64]| -> Result<Var> {
            if v.len() != d {
                return Err(Error::Dimension {
                    op: "latent",
                    lhs: vec![v.len()],
                    rhs: vec![d],
                });
            }
            Ok(g.constant(Tensor::new(vec![1, d], v.to_vec())?))
        };
        let z = row(g, &s.z)?;
        let z_sigma = match &s.z_sigma {
            Some(v) => Some(row(g, v)?),
            None => None,
        };
        Ok(LatentVars { z, z_sigma })
    }

    /// g applied once; `z_p` is empty when no static parameter is configured.
    pub fn evolve_latent(&self, s: &LatentState, z_p: &[f64]) -> Result<LatentState> {
        let mut g = Graph::new();
        let b = self.bind_evolution(&mut g);
        let l = self.latent_vars(&mut g, s)?;
        let zp = if z_p.is_empty() {
            None
        } else {
            Some(g.constant(Tensor::new(vec![1, z_p.len()], z_p.to_vec())?))
        };
        let out = self.evolve_var(&mut g, &b, l, zp)?;
        Ok(LatentState {
            z: g.value(out.z).data().to_vec(),
            z_sigma: out.z_sigma.map(|v| g.value(v).data().to_vec()),
        })
    }

    /// h_μ(z) as `[S, N, N]`.
    pub fn decode_state(&self, s: &LatentState) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let l = self.latent_vars(&mut g, s)?;
        let y = self.decode_state_var(&mut g, &b, l.z)?;
        Ok(Self::unbatch(g.value(y), true))
    }

    /// h_σ(z_σ) as `[S, N, N]`.
    pub fn decode_uncertainty(&self, s: &LatentState) -> Result<Tensor> {
        if !self.config.variant.with_sigma() {
            return Err(Error::contract("decode_uncertainty called on a deterministic model"));
        }
        let zs = s
            .z_sigma
            .as_ref()
            .ok_or_else(|| Error::contract("latent state has no z_sigma"))?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let t = g.constant(Tensor::new(vec![1, zs.len()], zs.clone())?);
        let y = self.decode_uncertainty_var(&mut g, &b, t)?;
        Ok(Self::unbatch(g.value(y), true))
    }

    /// Inference rollout. `init` is `[history·S, N, N]` or batched
    /// `[B, history·S, N, N]`; `truth` (teacher forcing only) has the same
    /// rank with at least `(steps−1)·S` frames. Outputs keep the input rank.
    pub fn rollout(
        &self,
        init: &Tensor,
        p: Option<&[f64]>,
        steps: usize,
        mode: RolloutMode,
        truth: Option<&Tensor>,
    ) -> Result<Vec<StepPrediction>> {
        let (init, squeeze) = Self::batched(init, 4)?;
        let batch = init.shape()[0];
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let zp = self.static_vars(&mut g, &b, p, batch)?;
        let init = g.constant(init);
        let truth = match truth {
            Some(t) if mode == RolloutMode::TeacherForcing => {
                let (t, _) = Self::batched(t, 4)?;
                Some(g.constant(t))
            }
            _ => None,
        };
        let steps = self.rollout_var(&mut g, &b, init, zp, steps, mode, truth)?;
        Ok(steps
            .into_iter()
            .map(|s| StepPrediction {
                mean: Self::unbatch(g.value(s.mean), squeeze),
                sigma: s.sigma.map(|v| Self::unbatch(g.value(v), squeeze)),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: &str) -> ModelConfig {
        let variant: Variant = variant.parse().unwrap();
        ModelConfig {
            grid: 8,
            history: 2,
            bundle: 1,
            latent_dim: 6,
            conv_blocks: 2,
            channels: 4,
            horizon: 2,
            loss: if variant.with_sigma() {
                LossFlavor::Nll
            } else {
                LossFlavor::Mse
            },
            variant,
            ..ModelConfig::default()
        }
    }

    fn block(frames: usize, n: usize, phase: f64) -> Tensor {
        let data = (0..frames * n * n).map(|i| (i as f64 * 0.37 + phase).sin()).collect();
        Tensor::new(vec![frames, n, n], data).unwrap()
    }

    #[test]
    fn shapes_and_positivity() {
        let m = SurrogateModel::new(tiny("latent+sigma+zsigma"), 1).unwrap();
        let s = m.encode(&block(2, 8, 0.0)).unwrap();
        assert_eq!(s.z.len(), 6);
        assert_eq!(s.z_sigma.as_ref().unwrap().len(), 6);
        let u = m.decode_state(&s).unwrap();
        assert_eq!(u.shape(), &[1, 8, 8]);
        let sig = m.decode_uncertainty(&s).unwrap();
        assert!(sig.data().iter().all(|&v| v >= 1e-4));
    }

    #[test]
    fn deterministic_variant_has_no_sigma() {
        let m = SurrogateModel::new(tiny("latent+deterministic"), 1).unwrap();
        let s = m.encode(&block(2, 8, 0.0)).unwrap();
        assert!(s.z_sigma.is_none());
        assert!(matches!(m.decode_uncertainty(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn rollout_modes_agree_on_first_step() {
        for v in ["latent+sigma+zsigma", "no_latent+sigma+zsigma", "latent+sigma+no_zsigma"] {
            let m = SurrogateModel::new(tiny(v), 3).unwrap();
            let init = block(2, 8, 0.1);
            let truth = block(3, 8, 0.7);
            let ar = m.rollout(&init, None, 1, RolloutMode::Autoregressive, None).unwrap();
            let tf = m.rollout(&init, None, 1, RolloutMode::TeacherForcing, Some(&truth)).unwrap();
            assert_eq!(ar, tf, "{v}");
            assert!(m.rollout(&init, None, 0, RolloutMode::Autoregressive, None).is_err());
            assert!(m.rollout(&init, None, 2, RolloutMode::TeacherForcing, None).is_err());
        }
    }

    #[test]
    fn static_passthrough() {
        let cfg = ModelConfig {
            param_dim: 1,
            static_dim: 1,
            ..tiny("latent+sigma+zsigma")
        };
        let m = SurrogateModel::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.encode_static(&[0.3]).unwrap(), vec![0.3]);
        let cfg = ModelConfig {
            static_dim: 5,
            static_layers: 2,
            ..cfg
        };
        let m = SurrogateModel::new(cfg, 0).unwrap();
        assert_eq!(m.encode_static(&[0.3]).unwrap().len(), 5);
        let m = SurrogateModel::new(tiny("latent+sigma+zsigma"), 0).unwrap();
        assert!(m.encode_static(&[]).unwrap().is_empty());
    }
}
