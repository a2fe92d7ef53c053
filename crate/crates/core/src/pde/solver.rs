//! Pseudo-spectral solver for 2D incompressible Navier–Stokes in vorticity
//! form on the unit torus.
//!
//! Velocity comes from the streamfunction (Δψ = −w, u = (∂_y ψ, −∂_x ψ)).
//! Diffusion is Crank–Nicolson; advection and forcing use a Heun
//! predictor–corrector. The state spectrum is masked by the 2/3 rule after
//! every step and the mean mode is held at zero.

use crate::error::{Error, Result};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Grid points per side; a power of two.
    pub grid: usize,
    pub viscosity: f64,
    /// Amplitude of f(x) = A·(sin(2π(x+y)) + cos(2π(x+y))).
    pub forcing_amplitude: f64,
    pub dt: f64,
    pub snapshot_interval: f64,
    pub snapshots: usize,
    pub seed: u64,
    /// Initial-condition field: spectral density ∝ (|k|² + τ²)^(−α).
    pub grf_alpha: f64,
    pub grf_tau: f64,
}

fn default_alpha() -> f64 {
    2.5
}

fn default_tau() -> f64 {
    7.0
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            grid: 32,
            viscosity: 1e-3,
            forcing_amplitude: 0.1,
            dt: 1e-3,
            snapshot_interval: 1.0,
            snapshots: 20,
            seed: 0,
            grf_alpha: default_alpha(),
            grf_tau: default_tau(),
        }
    }
}

impl SolverConfig {
    /// Configuration used for the 1000/200-trajectory benchmark (Re = 10⁴ at 64²).
    pub fn full_scale() -> Self {
        SolverConfig {
            grid: 64,
            viscosity: 1e-4,
            ..SolverConfig::default()
        }
    }

    /// Solver steps between consecutive snapshots.
    pub fn steps_per_snapshot(&self) -> usize {
        (self.snapshot_interval / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 || !self.grid.is_power_of_two() {
            return Err(Error::config(format!("grid {} must be a power of two ≥ 4", self.grid)));
        }
        if !(self.viscosity > 0.0) || !self.viscosity.is_finite() {
            return Err(Error::config("viscosity must be positive"));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("dt must be positive"));
        }
        let ratio = self.snapshot_interval / self.dt;
        if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(Error::config(format!(
                "snapshot interval {} is not an integer multiple of dt {}",
                self.snapshot_interval, self.dt
            )));
        }
        if self.snapshots == 0 {
            return Err(Error::config("snapshots must be ≥ 1"));
        }
        if !self.forcing_amplitude.is_finite() {
            return Err(Error::config("forcing amplitude must be finite"));
        }
        Ok(())
    }
}

/// 2D FFT on an `n × n` row-major grid.
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    column: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        Fft2 {
            n,
            fwd,
            inv,
            scratch: vec![Complex64::default(); scratch_len],
            column: vec![Complex64::default(); n],
        }
    }

    fn apply(&mut self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process_with_scratch(data, &mut self.scratch);
        for j in 0..n {
            for i in 0..n {
                self.column[i] = data[i * n + j];
            }
            plan.process_with_scratch(&mut self.column, &mut self.scratch);
            for i in 0..n {
                data[i * n + j] = self.column[i];
            }
        }
        if inverse {
            let s = 1.0 / (n * n) as f64;
            data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.apply(data, false);
    }

    /// Normalized inverse (round trip is the identity).
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.apply(data, true);
    }

    pub fn forward_real(&mut self, field: &[f64]) -> Vec<Complex64> {
        let mut c: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut c);
        c
    }

    pub fn inverse_real(&mut self, coeffs: &[Complex64]) -> Vec<f64> {
        let mut c = coeffs.to_vec();
        self.inverse(&mut c);
        c.into_iter().map(|v| v.re).collect()
    }
}

/// Signed integer wavenumber of FFT bin `i` on an `n`-point grid.
pub fn wavenumber(i: usize, n: usize) -> f64 {
    if i < n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Spectral operators and scratch for one grid size. Index `a` runs along x
/// and `b` along y: `field[a * n + b] = w(a/n, b/n)`.
pub struct Spectral {
    pub n: usize,
    fft: Fft2,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    mask: Vec<bool>,
}

impl Spectral {
    pub fn new(n: usize) -> Self {
        let mut kx = vec![0.0; n * n];
        let mut ky = vec![0.0; n * n];
        let mut k2 = vec![0.0; n * n];
        let mut mask = vec![false; n * n];
        let cutoff = 2.0 / 3.0 * (n as f64 / 2.0);
        for a in 0..n {
            for b in 0..n {
                let (ia, ib) = (wavenumber(a, n), wavenumber(b, n));
                let idx = a * n + b;
                kx[idx] = 2.0 * PI * ia;
                ky[idx] = 2.0 * PI * ib;
                k2[idx] = kx[idx] * kx[idx] + ky[idx] * ky[idx];
                mask[idx] = ia.abs() <= cutoff && ib.abs() <= cutoff;
            }
        }
        Spectral {
            n,
            fft: Fft2::new(n),
            kx,
            ky,
            k2,
            mask,
        }
    }

    pub fn fft(&mut self) -> &mut Fft2 {
        &mut self.fft
    }

    /// Whether bin `idx` survives the 2/3 dealiasing rule.
    pub fn retained(&self, idx: usize) -> bool {
        self.mask[idx]
    }

    pub fn dealias(&self, coeffs: &mut [Complex64]) {
        for (v, keep) in coeffs.iter_mut().zip(&self.mask) {
            if !keep {
                *v = Complex64::default();
            }
        }
    }

    /// Velocity spectra `(û, v̂)` from a vorticity spectrum.
    pub fn velocity_spectra(&self, w_hat: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let i = Complex64::new(0.0, 1.0);
        let mut u = vec![Complex64::default(); w_hat.len()];
        let mut v = vec![Complex64::default(); w_hat.len()];
        for idx in 0..w_hat.len() {
            if self.k2[idx] == 0.0 {
                continue;
            }
            let psi = w_hat[idx] / self.k2[idx];
            u[idx] = i * self.ky[idx] * psi;
            v[idx] = -i * self.kx[idx] * psi;
        }
        (u, v)
    }

    /// Physical velocity field of a vorticity field.
    pub fn velocity(&mut self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w_hat = self.fft.forward_real(w);
        let (u, v) = self.velocity_spectra(&w_hat);
        (self.fft.inverse_real(&u), self.fft.inverse_real(&v))
    }

    /// Max |∇·u| of the velocity recovered from `w`, evaluated spectrally.
    pub fn max_divergence(&mut self, w: &[f64]) -> f64 {
        let w_hat = self.fft.forward_real(w);
        let (u, v) = self.velocity_spectra(&w_hat);
        let i = Complex64::new(0.0, 1.0);
        let div: Vec<Complex64> = (0..u.len())
            .map(|idx| i * self.kx[idx] * u[idx] + i * self.ky[idx] * v[idx])
            .collect();
        self.fft
            .inverse_real(&div)
            .into_iter()
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Kinetic energy ½⟨|u|²⟩ (domain average).
    pub fn kinetic_energy(&mut self, w: &[f64]) -> f64 {
        let (u, v) = self.velocity(w);
        0.5 * u.iter().zip(&v).map(|(a, b)| a * a + b * b).sum::<f64>() / w.len() as f64
    }

    /// Spectrum of −u·∇w (dealiased), plus max |u| on the grid.
    fn advection(&mut self, w_hat: &[Complex64]) -> (Vec<Complex64>, f64) {
        let i = Complex64::new(0.0, 1.0);
        let (u_hat, v_hat) = self.velocity_spectra(w_hat);
        let wx: Vec<Complex64> = (0..w_hat.len()).map(|k| i * self.kx[k] * w_hat[k]).collect();
        let wy: Vec<Complex64> = (0..w_hat.len()).map(|k| i * self.ky[k] * w_hat[k]).collect();
        let u = self.fft.inverse_real(&u_hat);
        let v = self.fft.inverse_real(&v_hat);
        let wx = self.fft.inverse_real(&wx);
        let wy = self.fft.inverse_real(&wy);
        let mut umax: f64 = 0.0;
        let adv: Vec<f64> = (0..u.len())
            .map(|k| {
                umax = umax.max(u[k].abs()).max(v[k].abs());
                -(u[k] * wx[k] + v[k] * wy[k])
            })
            .collect();
        let mut out = self.fft.forward_real(&adv);
        self.dealias(&mut out);
        (out, umax)
    }
}

/// Time stepper holding the spectral state of one trajectory.
pub struct NavierStokes {
    pub spectral: Spectral,
    cfg: SolverConfig,
    w_hat: Vec<Complex64>,
    forcing_hat: Vec<Complex64>,
    pub time: f64,
}

impl NavierStokes {
    pub fn new(w0: &[f64], cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.grid;
        if w0.len() != n * n {
            return Err(Error::Dimension {
                op: "solve_navier_stokes",
                lhs: vec![n, n],
                rhs: vec![w0.len()],
            });
        }
        if w0.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("initial vorticity"));
        }
        let mut spectral = Spectral::new(n);
        let forcing: Vec<f64> = (0..n * n)
            .map(|idx| {
                let (x, y) = ((idx / n) as f64 / n as f64, (idx % n) as f64 / n as f64);
                let s = 2.0 * PI * (x + y);
                cfg.forcing_amplitude * (s.sin() + s.cos())
            })
            .collect();
        let mut forcing_hat = spectral.fft().forward_real(&forcing);
        forcing_hat[0] = Complex64::default();
        spectral.dealias(&mut forcing_hat);
        let mut w_hat = spectral.fft().forward_real(w0);
        w_hat[0] = Complex64::default();
        spectral.dealias(&mut w_hat);
        Ok(NavierStokes {
            spectral,
            cfg: cfg.clone(),
            w_hat,
            forcing_hat,
            time: 0.0,
        })
    }

    pub fn spectrum(&self) -> &[Complex64] {
        &self.w_hat
    }

    pub fn vorticity(&mut self) -> Vec<f64> {
        let w_hat = self.w_hat.clone();
        self.spectral.fft().inverse_real(&w_hat)
    }

    fn check_cfl(&self, umax: f64) -> Result<()> {
        let dx = 1.0 / self.cfg.grid as f64;
        let cfl = umax * self.cfg.dt / dx;
        if cfl > 1.0 {
            return Err(Error::Stability {
                cfl,
                max_dt: dx / umax,
            });
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<()> {
        let dt = self.cfg.dt;
        let nu = self.cfg.viscosity;
        let (adv1, umax) = self.spectral.advection(&self.w_hat);
        self.check_cfl(umax)?;
        let rhs1: Vec<Complex64> = adv1.iter().zip(&self.forcing_hat).map(|(a, f)| a + f).collect();
        let mut predictor = vec![Complex64::default(); self.w_hat.len()];
        for k in 0..predictor.len() {
            let d = 0.5 * dt * nu * self.spectral.k2[k];
            predictor[k] = ((1.0 - d) * self.w_hat[k] + dt * rhs1[k]) / (1.0 + d);
        }
        let (adv2, _) = self.spectral.advection(&predictor);
        for k in 0..self.w_hat.len() {
            let d = 0.5 * dt * nu * self.spectral.k2[k];
            let rhs = 0.5 * (rhs1[k] + adv2[k] + self.forcing_hat[k]);
            self.w_hat[k] = ((1.0 - d) * self.w_hat[k] + dt * rhs) / (1.0 + d);
        }
        self.w_hat[0] = Complex64::default();
        self.spectral.dealias(&mut self.w_hat);
        if self.w_hat.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::numeric(format!("vorticity spectrum at t={:.4}", self.time)));
        }
        self.time += dt;
        Ok(())
    }
}

/// Evolve `w0` and return `cfg.snapshots` fields, the first being `w0` with
/// its mean and dealiased modes projected out; snapshot `j` is at `j·Δt_snap`.
pub fn solve_navier_stokes(w0: &[f64], cfg: &SolverConfig) -> Result<Vec<Vec<f64>>> {
    let mut ns = NavierStokes::new(w0, cfg)?;
    let per = cfg.steps_per_snapshot();
    let mut out = Vec::with_capacity(cfg.snapshots);
    out.push(ns.vorticity());
    for _ in 1..cfg.snapshots {
        for _ in 0..per {
            ns.step()?;
        }
        out.push(ns.vorticity());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_roundtrip() {
        let mut f = Fft2::new(8);
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let coeffs = f.forward_real(&x);
        let back = f.inverse_real(&coeffs);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn rest_state_stays_at_rest() {
        let cfg = SolverConfig {
            grid: 16,
            forcing_amplitude: 0.0,
            snapshot_interval: 0.01,
            snapshots: 4,
            dt: 1e-3,
            ..SolverConfig::default()
        };
        let traj = solve_navier_stokes(&vec![0.0; 256], &cfg).unwrap();
        assert!(traj.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SolverConfig::default();
        cfg.grid = 48;
        assert!(cfg.validate().is_err());
        let mut cfg = SolverConfig::default();
        cfg.snapshot_interval = 0.0025;
        cfg.dt = 0.001;
        assert!(cfg.validate().is_err());
        let mut cfg = SolverConfig::default();
        cfg.viscosity = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cfl_violation_is_reported() {
        let n = 16;
        let cfg = SolverConfig {
            grid: n,
            dt: 0.5,
            snapshot_interval: 0.5,
            snapshots: 2,
            ..SolverConfig::default()
        };
        let w0: Vec<f64> = (0..n * n)
            .map(|i| 50.0 * (2.0 * PI * (i / n) as f64 / n as f64).sin())
            .collect();
        assert!(matches!(solve_navier_stokes(&w0, &cfg), Err(Error::Stability { .. })));
    }
}
