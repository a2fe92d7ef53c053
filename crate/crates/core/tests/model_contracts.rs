mod common;

use common::{random_field, tiny_config};
use leuq_core::model::{LatentState, RolloutMode, SurrogateModel};
use leuq_core::tensor::Graph;
use std::time::Instant;

#[test]
fn next_state_ignores_uncertainty_latent() {
    assert_eq!(common::zsigma_leaks(100), 0);
}

#[test]
fn zero_evolution_is_an_exact_fixed_point() {
    assert!(common::zero_evolution_is_fixed_point(50));
}

#[test]
fn two_step_decode_equals_composed_evolution() {
    let model = SurrogateModel::new(tiny_config("latent+sigma+zsigma", 8), 2).unwrap();
    let init = random_field(3, vec![2, 8, 8]);
    let out = model.rollout(&init, None, 2, RolloutMode::Autoregressive, None).unwrap();
    let z = model.encode(&init).unwrap();
    let z2 = model.evolve_latent(&model.evolve_latent(&z, &[]).unwrap(), &[]).unwrap();
    let direct = model.decode_state(&z2).unwrap();
    let bits = |t: &leuq_core::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&out[1].mean.clone().reshape(direct.shape().to_vec()).unwrap()), bits(&direct));
}

#[test]
fn checkpoint_roundtrip_preserves_rollout_bits() {
    let dir = tempfile::tempdir().unwrap();
    for variant in ["latent+sigma+zsigma", "no_latent", "deterministic", "no_zsigma"] {
        let model = SurrogateModel::new(tiny_config(variant, 8), 4).unwrap();
        let path = dir.path().join(format!("{variant}.ckpt"));
        model.save(&path).unwrap();
        let back = SurrogateModel::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        let init = random_field(5, vec![2, 8, 8]);
        let a = model.rollout(&init, None, 3, RolloutMode::Autoregressive, None).unwrap();
        let b = back.rollout(&init, None, 3, RolloutMode::Autoregressive, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.mean.data().iter().zip(y.mean.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
            match (&x.sigma, &y.sigma) {
                (Some(s), Some(t)) => assert!(s.data().iter().zip(t.data()).all(|(p, q)| p.to_bits() == q.to_bits())),
                (None, None) => {}
                _ => panic!("{variant}: σ presence changed"),
            }
        }
    }
}

/// Element count touched by one evolution step after encoding.
fn step_footprint(variant: &str, grid: usize) -> usize {
    let model = SurrogateModel::new(tiny_config(variant, grid), 1).unwrap();
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let init = g.constant(random_field(1, vec![1, 2, grid, grid]));
    let latent = model.encode_var(&mut g, &b, init).unwrap();
    let zp = model.encode_static_var(&mut g, &b, None).unwrap();
    if model.config().variant.evolution == leuq_core::model::Evolution::Latent {
        let mark = g.len();
        model.evolve_var(&mut g, &b, latent, zp).unwrap();
        g.numel_since(mark)
    } else {
        // one input-space step: decode, shift the history, re-encode
        let mark = g.len();
        model.rollout_var(&mut g, &b, init, zp, 1, RolloutMode::Autoregressive, None).unwrap();
        g.numel_since(mark)
    }
}

#[test]
fn latent_steps_do_not_scale_with_grid() {
    let (a, b) = (step_footprint("latent+sigma+zsigma", 16), step_footprint("latent+sigma+zsigma", 32));
    assert_eq!(a, b);
    assert!(a < 16 * 16);
    let (c, d) = (step_footprint("no_latent", 16), step_footprint("no_latent", 32));
    assert!(d as f64 > 3.5 * c as f64, "{c} vs {d}");
}

#[test]
fn latent_step_time_is_grid_independent() {
    let time = |grid: usize| {
        let mut cfg = tiny_config("latent+sigma+zsigma", grid);
        cfg.latent_dim = 64;
        let model = SurrogateModel::new(cfg, 0).unwrap();
        let z = model.encode(&random_field(2, vec![2, grid, grid])).unwrap();
        (0..7)
            .map(|_| {
                let t = Instant::now();
                let mut s: LatentState = z.clone();
                for _ in 0..400 {
                    s = model.evolve_latent(&s, &[]).unwrap();
                }
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let (t32, t64) = (time(32), time(64));
    assert!(t64 / t32 < 1.2, "{t32:.4}s vs {t64:.4}s");
}
