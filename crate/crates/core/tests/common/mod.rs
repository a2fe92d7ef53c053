//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use leuq_core::model::{LossFlavor, ModelConfig, SurrogateModel, Variant};
use leuq_core::pde::{solve_navier_stokes, SolverConfig, Spectral};
use leuq_core::tensor::{Graph, Tensor, Var};
use leuq_core::uq_eval::{calibration_curve, calibration_metrics, CalibrationMetrics, PredictiveSet};
use leuq_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use std::f64::consts::PI;

#[derive(Clone, Copy)]
pub enum Domain {
    Any,
    Positive,
    /// |x| ≥ 0.1, away from kinks.
    AwayFromZero,
}

impl Domain {
    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Domain::Any => rng.random_range(-1.5..1.5),
            Domain::Positive => rng.random_range(0.3..2.0),
            Domain::AwayFromZero => {
                let v: f64 = rng.random_range(0.1..1.5);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            }
        }
    }
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

pub struct Primitive {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub build: Build,
}

fn p(name: &'static str, inputs: Vec<(Vec<usize>, Domain)>, build: Build) -> Primitive {
    Primitive { name, inputs, build }
}

/// Every differentiable primitive of the graph.
pub fn primitives() -> Vec<Primitive> {
    use Domain::*;
    vec![
        p("add", vec![(vec![2, 3], Any), (vec![2, 3], Any)], |g, v| g.add(v[0], v[1])),
        p("sub", vec![(vec![2, 3], Any), (vec![2, 3], Any)], |g, v| g.sub(v[0], v[1])),
        p("mul", vec![(vec![2, 3], Any), (vec![2, 3], Any)], |g, v| g.mul(v[0], v[1])),
        p("div", vec![(vec![2, 3], Any), (vec![2, 3], Positive)], |g, v| g.div(v[0], v[1])),
        p("scale", vec![(vec![4], Any)], |g, v| g.scale(v[0], -1.7)),
        p("add_scalar", vec![(vec![4], Any)], |g, v| g.add_scalar(v[0], 0.3)),
        p("elu", vec![(vec![3, 4], AwayFromZero)], |g, v| g.elu(v[0])),
        p("softplus", vec![(vec![3, 4], Any)], |g, v| g.softplus(v[0])),
        p("exp", vec![(vec![5], Any)], |g, v| g.exp(v[0])),
        p("log", vec![(vec![5], Positive)], |g, v| g.log(v[0])),
        p("square", vec![(vec![5], Any)], |g, v| g.square(v[0])),
        p("abs", vec![(vec![5], AwayFromZero)], |g, v| g.abs(v[0])),
        p("sum", vec![(vec![2, 3], Any)], |g, v| g.sum(v[0])),
        p("mean", vec![(vec![2, 3], Any)], |g, v| g.mean(v[0])),
        p("sum_per_sample", vec![(vec![3, 2, 2], Any)], |g, v| g.sum_per_sample(v[0])),
        p("reshape", vec![(vec![2, 6], Any)], |g, v| g.reshape(v[0], &[3, 4])),
        p("matmul", vec![(vec![3, 4], Any), (vec![4, 2], Any)], |g, v| g.matmul(v[0], v[1])),
        p("add_row_bias", vec![(vec![3, 4], Any), (vec![4], Any)], |g, v| g.add_row_bias(v[0], v[1])),
        p("add_channel_bias", vec![(vec![2, 3, 2, 2], Any), (vec![3], Any)], |g, v| {
            g.add_channel_bias(v[0], v[1])
        }),
        p("concat_cols", vec![(vec![2, 3], Any), (vec![2, 2], Any)], |g, v| g.concat_cols(&[v[0], v[1]])),
        p("slice_cols", vec![(vec![2, 5], Any)], |g, v| g.slice_cols(v[0], 1, 4)),
        p("slice_channels", vec![(vec![2, 4, 2, 2], Any)], |g, v| g.slice_channels(v[0], 1, 3)),
        p("concat_channels", vec![(vec![2, 1, 2, 2], Any), (vec![2, 2, 2, 2], Any)], |g, v| {
            g.concat_channels(&[v[0], v[1]])
        }),
        p("conv2d_s1", vec![(vec![2, 2, 5, 5], Any), (vec![3, 2, 3, 3], Any)], |g, v| g.conv2d(v[0], v[1], 1, 1)),
        p("conv2d_s2", vec![(vec![1, 2, 6, 6], Any), (vec![2, 2, 4, 4], Any)], |g, v| g.conv2d(v[0], v[1], 2, 1)),
        p("conv_transpose2d", vec![(vec![1, 2, 3, 3], Any), (vec![2, 3, 4, 4], Any)], |g, v| {
            g.conv_transpose2d(v[0], v[1], 2, 1)
        }),
        p(
            "group_norm",
            vec![(vec![2, 4, 3, 3], Any), (vec![4], Any), (vec![4], Any)],
            |g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5),
        ),
    ]
}

fn relative(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Worst relative error between backprop and central differences of
/// `Σ c ⊙ op(x)` over `trials` random draws.
pub fn fd_check(prim: &Primitive, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let inputs: Vec<Vec<f64>> = prim
            .inputs
            .iter()
            .map(|(s, d)| (0..s.iter().product::<usize>()).map(|_| d.sample(&mut rng)).collect())
            .collect();
        let out_len = {
            let mut g = Graph::new();
            let vs: Vec<Var> = prim
                .inputs
                .iter()
                .zip(&inputs)
                .map(|((s, _), x)| g.constant(Tensor::new(s.clone(), x.clone()).unwrap()))
                .collect();
            let y = (prim.build)(&mut g, &vs).unwrap();
            g.value(y).numel()
        };
        let c: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |xs: &[Vec<f64>], grad: bool| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let vs: Vec<Var> = prim
                .inputs
                .iter()
                .zip(xs)
                .map(|((s, _), x)| g.leaf(Tensor::new(s.clone(), x.clone()).unwrap().with_grad()))
                .collect();
            let y = (prim.build)(&mut g, &vs).unwrap();
            let shape = g.shape(y).to_vec();
            let cv = g.constant(Tensor::new(shape, c.clone()).unwrap());
            let prod = g.mul(y, cv).unwrap();
            let l = g.sum(prod).unwrap();
            let v = g.value(l).item();
            let grads = if grad {
                let gr = g.backward(l).unwrap();
                vs.iter().map(|&x| gr.get(x)).collect()
            } else {
                Vec::new()
            };
            (v, grads)
        };
        let (_, analytic) = eval(&inputs, true);
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let mut fd = vec![0.0; x.len()];
            for i in 0..x.len() {
                let mut plus = inputs.clone();
                plus[k][i] += h;
                let mut minus = inputs.clone();
                minus[k][i] -= h;
                fd[i] = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            }
            worst = worst.max(relative(&analytic[k], &fd));
        }
    }
    worst
}

/// Tiny model used by the end-to-end gradient check.
pub fn gradient_check_model() -> SurrogateModel {
    let cfg = ModelConfig {
        grid: 16,
        history: 2,
        bundle: 1,
        latent_dim: 8,
        conv_blocks: 2,
        channels: 4,
        horizon: 2,
        ..ModelConfig::default()
    };
    let mut model = SurrogateModel::new(cfg, 5).unwrap();
    // non-zero evolution output so every path carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for id in model.evolution_output_params() {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    model
}

/// Relative error of the training-loss gradient against central differences
/// over `samples` random coordinates of the parameters accepted by `select`.
/// The consistency target is a constant of the graph, so finite differences
/// only agree with backprop for parameters the target encoder does not use.
pub fn end_to_end_gradient_error(samples: usize, consistency: bool, select: fn(&str) -> bool) -> f64 {
    use leuq_core::pde::BundledWindow;
    use leuq_core::training::{compute_loss, loss_and_gradients, LossWeights, WindowBatch};
    let mut model = gradient_check_model();
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = cfg.grid;
    let mut field = |frames: usize| {
        Tensor::new(
            vec![frames, n, n],
            (0..frames * n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let windows: Vec<BundledWindow> = (0..2)
        .map(|i| BundledWindow {
            trajectory: i,
            start: 0,
            bundle: 1,
            input: field(cfg.input_frames()),
            target: field(cfg.horizon),
        })
        .collect();
    let refs: Vec<&BundledWindow> = windows.iter().collect();
    let weights = LossWeights {
        consistency,
        ..LossWeights::standard(cfg.horizon)
    };
    let batch = WindowBatch::new(&refs).unwrap();
    let (_, grads) = loss_and_gradients(&model, &batch, &weights).unwrap();
    let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
    let eligible: Vec<usize> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| select(name))
        .map(|(i, _)| i)
        .collect();
    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    let h = 1e-5;
    for _ in 0..samples {
        let t = eligible[rng.random_range(0..eligible.len())];
        let i = rng.random_range(0..sizes[t]);
        let orig = model.params_mut().tensors_mut()[t].data()[i];
        model.params_mut().tensors_mut()[t].data_mut()[i] = orig + h;
        let lp = compute_loss(&model, &refs, &weights).unwrap().total;
        model.params_mut().tensors_mut()[t].data_mut()[i] = orig - h;
        let lm = compute_loss(&model, &refs, &weights).unwrap().total;
        model.params_mut().tensors_mut()[t].data_mut()[i] = orig;
        analytic.push(grads[t][i]);
        fd.push((lp - lm) / (2.0 * h));
    }
    relative(&analytic, &fd)
}

pub struct SolverOracle {
    pub decay_error: f64,
    pub max_divergence: f64,
    pub energy_monotone: bool,
}

/// Single-mode decay w0 = sin(2πx)·sin(2πy) with ν = 1e-2 and no forcing on 64².
pub fn solver_oracle() -> SolverOracle {
    let n = 64;
    let nu = 1e-2;
    let cfg = SolverConfig {
        grid: n,
        viscosity: nu,
        forcing_amplitude: 0.0,
        dt: 1e-3,
        snapshot_interval: 0.1,
        snapshots: 11,
        seed: 0,
        ..SolverConfig::default()
    };
    let w0: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (x, y) = ((idx / n) as f64 / n as f64, (idx % n) as f64 / n as f64);
            (2.0 * PI * x).sin() * (2.0 * PI * y).sin()
        })
        .collect();
    let snaps = solve_navier_stokes(&w0, &cfg).unwrap();
    let expected = (-8.0 * PI * PI * nu).exp();
    let last = snaps.last().unwrap();
    let num: f64 = last.iter().zip(&w0).map(|(a, b)| (a - b * expected).powi(2)).sum::<f64>().sqrt();
    let den: f64 = w0.iter().map(|b| (b * expected).powi(2)).sum::<f64>().sqrt();

    // divergence and energy on a turbulent-looking random field without forcing
    let rcfg = SolverConfig {
        grid: 32,
        viscosity: 1e-3,
        forcing_amplitude: 0.0,
        dt: 1e-3,
        snapshot_interval: 0.05,
        snapshots: 11,
        ..SolverConfig::default()
    };
    let w0 = leuq_core::pde::gaussian_random_field(32, 2.5, 7.0, 3);
    let snaps2 = solve_navier_stokes(&w0, &rcfg).unwrap();
    let mut spectral = Spectral::new(32);
    let mut max_div: f64 = 0.0;
    let mut energies = Vec::new();
    for s in &snaps2 {
        max_div = max_div.max(spectral.max_divergence(s));
        energies.push(spectral.kinetic_energy(s));
    }
    let mut spec64 = Spectral::new(64);
    for s in &snaps {
        max_div = max_div.max(spec64.max_divergence(s));
    }
    let energy_monotone = energies.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    SolverOracle {
        decay_error: num / den,
        max_divergence: max_div,
        energy_monotone,
    }
}

pub struct CalibrationOracles {
    pub calibrated: CalibrationMetrics,
    pub degenerate_ma: f64,
    pub overconfident_ma: f64,
    pub overconfident_quadrature: f64,
}

/// ∫₀¹ |Φ(0.3·Φ⁻¹(p)) − p| dp by composite Simpson on a fine grid.
pub fn overconfident_quadrature(factor: f64) -> f64 {
    let normal = Normal::standard();
    let n = 200_000;
    let h = 1.0 / n as f64;
    let f = |p: f64| {
        if p <= 0.0 || p >= 1.0 {
            0.0
        } else {
            (normal.cdf(factor * normal.inverse_cdf(p)) - p).abs()
        }
    };
    let mut s = f(0.0) + f(1.0);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(i as f64 * h);
    }
    s * h / 3.0
}

pub fn calibration_oracles() -> CalibrationOracles {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 100_000;
    let mut mu = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let m: f64 = rng.random_range(-2.0..2.0);
        let s: f64 = rng.random_range(0.1..2.0);
        let e: f64 = StandardNormal.sample(&mut rng);
        mu.push(m);
        sigma.push(s);
        y.push(m + s * e);
    }
    let ps = PredictiveSet::new(mu.clone(), sigma.clone(), y.clone()).unwrap();
    let calibrated = calibration_metrics(&calibration_curve(&ps, 100).unwrap());

    let huge = vec![1e12; n];
    let ps = PredictiveSet::new(mu.clone(), huge, y.clone()).unwrap();
    let degenerate_ma = calibration_metrics(&calibration_curve(&ps, 100).unwrap()).ma;

    // the reported σ is 0.3× too small, so residuals/σ have std 1/0.3
    let shrunk: Vec<f64> = sigma.iter().map(|s| 0.3 * s).collect();
    let ps = PredictiveSet::new(mu, shrunk, y).unwrap();
    let overconfident_ma = calibration_metrics(&calibration_curve(&ps, 100).unwrap()).ma;
    CalibrationOracles {
        calibrated,
        degenerate_ma,
        overconfident_ma,
        overconfident_quadrature: overconfident_quadrature(0.3),
    }
}

pub fn tiny_config(variant: &str, grid: usize) -> ModelConfig {
    let variant: Variant = variant.parse().unwrap();
    ModelConfig {
        grid,
        history: 2,
        bundle: 1,
        latent_dim: 6,
        conv_blocks: 2,
        channels: 4,
        horizon: 2,
        loss: if variant.with_sigma() { LossFlavor::Nll } else { LossFlavor::Mse },
        variant,
        ..ModelConfig::default()
    }
}

pub fn random_field(seed: u64, shape: Vec<usize>) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Number of models (out of `count`) where perturbing z_σ changes z'.
pub fn zsigma_leaks(count: usize) -> usize {
    use leuq_core::model::LatentState;
    let mut leaks = 0;
    for seed in 0..count as u64 {
        let mut cfg = tiny_config("latent+sigma+zsigma", 8);
        cfg.latent_dim = 4 + (seed as usize % 5);
        let mut model = SurrogateModel::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for id in model.evolution_output_params() {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        let d = cfg.latent_dim;
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zs: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zs2: Vec<f64> = zs.iter().map(|v| v + rng.random_range(-5.0..5.0)).collect();
        let a = model
            .evolve_latent(&LatentState { z: z.clone(), z_sigma: Some(zs) }, &[])
            .unwrap();
        let b = model.evolve_latent(&LatentState { z, z_sigma: Some(zs2) }, &[]).unwrap();
        if a.z.iter().zip(&b.z).any(|(x, y)| x.to_bits() != y.to_bits()) {
            leaks += 1;
        }
    }
    leaks
}

/// True when zero-initialized evolution MLPs keep (z, z_σ) bit-exact for `steps` steps.
pub fn zero_evolution_is_fixed_point(steps: usize) -> bool {
    use leuq_core::model::LatentState;
    let mut model = SurrogateModel::new(tiny_config("latent+sigma+zsigma", 8), 9).unwrap();
    model.zero_evolution();
    let start = model.encode(&random_field(1, vec![2, 8, 8])).unwrap();
    let mut s: LatentState = start.clone();
    for _ in 0..steps {
        s = model.evolve_latent(&s, &[]).unwrap();
        if s != start {
            return false;
        }
    }
    true
}
