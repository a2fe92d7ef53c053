//! Trajectory corpora: generation and the `LEUQDS1` file format.
//!
//! File layout: magic `LEUQDS1\0`, little-endian `u64` header length, JSON
//! header (`version`, `config`, `shape`, `split`, `crc32`), then the states as
//! row-major little-endian `f64`. The CRC32 covers the payload bytes.

use super::solver::{solve_navier_stokes, wavenumber, Fft2, SolverConfig};
use crate::error::{Error, Result};
use crate::seed;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"LEUQDS1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `[n_traj, T_snap, N, N]` vorticity snapshots with their generator config.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub config: SolverConfig,
    pub split: Split,
    n_traj: usize,
    states: Vec<f64>,
}

impl TrajectorySet {
    pub fn new(config: SolverConfig, split: Split, n_traj: usize, states: Vec<f64>) -> Result<Self> {
        let n = config.grid;
        if n_traj == 0 {
            return Err(Error::config("trajectory set needs at least one trajectory"));
        }
        if states.len() != n_traj * config.snapshots * n * n {
            return Err(Error::Dimension {
                op: "trajectory_set",
                lhs: vec![n_traj, config.snapshots, n, n],
                rhs: vec![states.len()],
            });
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("trajectory states"));
        }
        Ok(TrajectorySet {
            config,
            split,
            n_traj,
            states,
        })
    }

    pub fn len(&self) -> usize {
        self.n_traj
    }

    pub fn is_empty(&self) -> bool {
        self.n_traj == 0
    }

    pub fn snapshots(&self) -> usize {
        self.config.snapshots
    }

    pub fn grid(&self) -> usize {
        self.config.grid
    }

    pub fn shape(&self) -> [usize; 4] {
        let n = self.grid();
        [self.n_traj, self.snapshots(), n, n]
    }

    pub fn data(&self) -> &[f64] {
        &self.states
    }

    pub fn frame(&self, traj: usize, t: usize) -> &[f64] {
        let nn = self.grid() * self.grid();
        let start = (traj * self.snapshots() + t) * nn;
        &self.states[start..start + nn]
    }

    /// Contiguous frames `[t0, t0 + len)` of one trajectory.
    pub fn frames(&self, traj: usize, t0: usize, len: usize) -> &[f64] {
        let nn = self.grid() * self.grid();
        let start = (traj * self.snapshots() + t0) * nn;
        &self.states[start..start + len * nn]
    }

    /// Subset of trajectories by index.
    pub fn select(&self, indices: &[usize]) -> Result<TrajectorySet> {
        let len = self.snapshots() * self.grid() * self.grid();
        let mut states = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.n_traj {
                return Err(Error::config(format!("trajectory {i} out of range")));
            }
            states.extend_from_slice(&self.states[i * len..(i + 1) * len]);
        }
        TrajectorySet::new(self.config.clone(), self.split, indices.len(), states)
    }
}

/// Mean-free Gaussian random field with spectral density ∝ (|k|² + τ²)^(−α).
pub fn gaussian_random_field(n: usize, alpha: f64, tau: f64, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    let sigma = tau.powf(alpha - 1.0);
    let mut coeff = vec![Complex64::default(); n * n];
    for a in 0..n {
        for b in 0..n {
            let (ka, kb) = (wavenumber(a, n), wavenumber(b, n));
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            if ka == 0.0 && kb == 0.0 {
                continue;
            }
            let k2 = 4.0 * PI * PI * (ka * ka + kb * kb);
            let amp = (n * n) as f64 * 2f64.sqrt() * sigma * (k2 + tau * tau).powf(-alpha / 2.0);
            coeff[a * n + b] = Complex64::new(re, im) * amp;
        }
    }
    let mut fft = Fft2::new(n);
    fft.inverse_real(&coeff)
}

fn simulate(cfg: &SolverConfig, split: Split, count: usize, offset: usize) -> Result<TrajectorySet> {
    let n = cfg.grid;
    let trajs: Vec<Result<Vec<f64>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let index = (offset + i) as u64;
            let w0 = gaussian_random_field(
                n,
                cfg.grf_alpha,
                cfg.grf_tau,
                seed::derive_indexed(cfg.seed, "initial-condition", index),
            );
            solve_navier_stokes(&w0, cfg)
                .map(|frames| frames.concat())
                .map_err(|e| Error::Trajectory {
                    index: offset + i,
                    source: Box::new(e),
                })
        })
        .collect();
    let mut states = Vec::with_capacity(count * cfg.snapshots * n * n);
    for t in trajs {
        states.extend(t?);
    }
    TrajectorySet::new(cfg.clone(), split, count, states)
}

/// Train and test corpora; trajectory `i` (train first, then test) draws its
/// initial condition from a seed derived from `cfg.seed` and `i`.
pub fn generate_dataset(cfg: &SolverConfig, n_train: usize, n_test: usize) -> Result<(TrajectorySet, TrajectorySet)> {
    cfg.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::config("n_train and n_test must both be ≥ 1"));
    }
    let train = simulate(cfg, Split::Train, n_train, 0)?;
    let test = simulate(cfg, Split::Test, n_test, n_train)?;
    Ok((train, test))
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: SolverConfig,
    shape: [usize; 4],
    split: Split,
    crc32: u32,
}

pub fn encode_dataset(ts: &TrajectorySet) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(ts.states.len() * 8);
    for v in &ts.states {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let header = serde_json::to_vec(&Header {
        version: FORMAT_VERSION,
        config: ts.config.clone(),
        shape: ts.shape(),
        split: ts.split,
        crc32: crc32fast::hash(&payload),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TrajectorySet> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(Error::Format("dataset truncated in header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }
    let payload = &body[hlen..];
    let expected_len = header.shape.iter().product::<usize>() * 8;
    if payload.len() != expected_len {
        return Err(Error::Format(format!(
            "payload has {} bytes, header shape {:?} needs {expected_len}",
            payload.len(),
            header.shape
        )));
    }
    let actual = crc32fast::hash(payload);
    if actual != header.crc32 {
        return Err(Error::Checksum {
            expected: header.crc32,
            actual,
        });
    }
    let [n_traj, t, n1, n2] = header.shape;
    if t != header.config.snapshots || n1 != header.config.grid || n2 != header.config.grid {
        return Err(Error::Format("header shape disagrees with config".into()));
    }
    let states = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    TrajectorySet::new(header.config, header.split, n_traj, states)
}

pub fn save_dataset(ts: &TrajectorySet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dataset(ts)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<TrajectorySet> {
    decode_dataset(&std::fs::read(path)?)
}
