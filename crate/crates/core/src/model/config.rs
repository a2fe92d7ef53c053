use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evolution {
    /// Evolve in latent space; encode once, decode on demand.
    Latent,
    /// Re-encode the (predicted) input window every step.
    NoLatent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uncertainty {
    WithSigma,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// z_σ is carried forward through g_σ.
    ZSigma,
    /// z_σ is recomputed from z alone at every state.
    NoZSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFlavor {
    Nll,
    Mse,
    L1,
}

impl FromStr for LossFlavor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nll" => Ok(LossFlavor::Nll),
            "mse" => Ok(LossFlavor::Mse),
            "l1" => Ok(LossFlavor::L1),
            other => Err(Error::config(format!("unknown loss flavor {other:?} (nll, mse, l1)"))),
        }
    }
}

impl fmt::Display for LossFlavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossFlavor::Nll => "nll",
            LossFlavor::Mse => "mse",
            LossFlavor::L1 => "l1",
        })
    }
}

/// The three architecture switches, written `latent+sigma+zsigma` on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub evolution: Evolution,
    pub uncertainty: Uncertainty,
    pub propagation: Propagation,
}

impl Variant {
    pub const HEADLINE: Variant = Variant {
        evolution: Evolution::Latent,
        uncertainty: Uncertainty::WithSigma,
        propagation: Propagation::ZSigma,
    };

    pub fn with_sigma(&self) -> bool {
        self.uncertainty == Uncertainty::WithSigma
    }

    pub fn propagates_zsigma(&self) -> bool {
        self.with_sigma() && self.propagation == Propagation::ZSigma
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::HEADLINE
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut v = Variant::HEADLINE;
        for part in s.split('+').map(str::trim) {
            match part {
                "latent" => v.evolution = Evolution::Latent,
                "no_latent" | "nolatent" => v.evolution = Evolution::NoLatent,
                "sigma" => v.uncertainty = Uncertainty::WithSigma,
                "deterministic" => v.uncertainty = Uncertainty::Deterministic,
                "zsigma" => v.propagation = Propagation::ZSigma,
                "no_zsigma" => v.propagation = Propagation::NoZSigma,
                other => return Err(Error::config(format!("unknown variant component {other:?}"))),
            }
        }
        Ok(v)
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = match self.evolution {
            Evolution::Latent => "latent",
            Evolution::NoLatent => "no_latent",
        };
        let u = match self.uncertainty {
            Uncertainty::WithSigma => "sigma",
            Uncertainty::Deterministic => "deterministic",
        };
        let p = match self.propagation {
            Propagation::ZSigma => "zsigma",
            Propagation::NoZSigma => "no_zsigma",
        };
        write!(f, "{e}+{u}+{p}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Spatial extent N of the square input grid.
    pub grid: usize,
    /// Input bundles per encoder call; the encoder sees `history·bundle` frames.
    pub history: usize,
    /// Temporal bundling width S.
    pub bundle: usize,
    /// Width d_z of z and z_σ.
    pub latent_dim: usize,
    /// Width of the static parameter p (0 = no static parameter).
    pub param_dim: usize,
    /// Width d_zp of z_p; must equal `param_dim` when `static_layers == 0`.
    pub static_dim: usize,
    /// MLP depth F_r' of the static encoder.
    pub static_layers: usize,
    /// Number of strided conv blocks F_q.
    pub conv_blocks: usize,
    /// Base channel count C.
    pub channels: usize,
    /// Training rollout length M.
    pub horizon: usize,
    pub variant: Variant,
    pub loss: LossFlavor,
    pub sigma_min: f64,
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: 32,
            history: 10,
            bundle: 1,
            latent_dim: 128,
            param_dim: 0,
            static_dim: 0,
            static_layers: 0,
            conv_blocks: 3,
            channels: 32,
            horizon: 4,
            variant: Variant::HEADLINE,
            loss: LossFlavor::Nll,
            sigma_min: 1e-4,
            norm_groups: 2,
        }
    }
}

impl ModelConfig {
    /// Default architecture for a grid: F_q = 4 at 64², 3 at 32².
    pub fn for_grid(grid: usize) -> Self {
        let conv_blocks = if grid >= 64 { 4 } else { 3 };
        ModelConfig {
            grid,
            conv_blocks,
            ..ModelConfig::default()
        }
    }

    pub fn input_frames(&self) -> usize {
        self.history * self.bundle
    }

    /// Spatial extent of the innermost feature map.
    pub fn bottleneck(&self) -> usize {
        self.grid >> self.conv_blocks
    }

    /// Channels after the stem (index 0) and after each conv block.
    pub fn channel_plan(&self) -> Vec<usize> {
        let mut plan = vec![self.channels];
        plan.extend((0..self.conv_blocks).map(|i| self.channels << i));
        plan
    }

    pub fn encoder_width(&self) -> usize {
        if self.variant.propagates_zsigma() {
            2 * self.latent_dim
        } else {
            self.latent_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.latent_dim == 0 {
            return bad("latent_dim must be ≥ 1".into());
        }
        if self.conv_blocks == 0 {
            return bad("conv_blocks must be ≥ 1".into());
        }
        if self.history == 0 || self.bundle == 0 || self.horizon == 0 {
            return bad("history, bundle and horizon must be ≥ 1".into());
        }
        if self.grid == 0 || !self.grid.is_multiple_of(1 << self.conv_blocks) {
            return bad(format!(
                "grid {} is not divisible by 2^{} (conv_blocks)",
                self.grid, self.conv_blocks
            ));
        }
        if self.norm_groups == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.norm_groups) {
            return bad(format!(
                "channels {} not divisible into {} normalization groups",
                self.channels, self.norm_groups
            ));
        }
        if self.static_layers == 0 && self.static_dim != self.param_dim {
            return bad("static_dim must equal param_dim when the static encoder has no layers".into());
        }
        if self.param_dim == 0 && self.static_dim != 0 {
            return bad("static_dim > 0 requires a static parameter".into());
        }
        if !(self.sigma_min > 0.0) {
            return bad("sigma_min must be positive".into());
        }
        match (self.variant.uncertainty, self.variant.propagation, self.loss) {
            (Uncertainty::Deterministic, Propagation::NoZSigma, _) => {
                bad("no_zsigma requires the sigma variant".into())
            }
            (Uncertainty::Deterministic, _, LossFlavor::Nll) => {
                bad("the nll loss needs a sigma head; use mse or l1 for deterministic models".into())
            }
            _ => Ok(()),
        }
    }
}
