mod common;

use leuq_core::uq_eval::{
    calibration_curve, calibration_metrics, ensemble_aggregate, point_metrics, PredictiveSet,
};
use proptest::prelude::*;

#[test]
fn synthetic_calibration_oracles() {
    let o = common::calibration_oracles();
    assert!(o.calibrated.ma < 0.01, "MA {}", o.calibrated.ma);
    assert!(o.calibrated.mace < 0.01, "MACE {}", o.calibrated.mace);
    // every quantile sits at 0.5, so the curve is a unit step at p = 0.5
    assert!((o.degenerate_ma - 0.25).abs() < 1e-3, "MA {}", o.degenerate_ma);
    assert!(
        (o.overconfident_ma - o.overconfident_quadrature).abs() < 0.01,
        "{} vs {}",
        o.overconfident_ma,
        o.overconfident_quadrature
    );
}

#[test]
fn quadrature_oracle_is_converged() {
    assert!(common::overconfident_quadrature(1.0) < 1e-8);
    // adaptive Gauss-Kronrod reference for factor 0.3
    let a = common::overconfident_quadrature(0.3);
    assert!((a - 0.157_226_420_922_686_6).abs() < 1e-6, "{a}");
}

fn triple() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    proptest::collection::vec((-3.0f64..3.0, 0.05f64..3.0, -3.0f64..3.0), 5..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn curve_is_monotone_and_rmsce_dominates_mace(rows in triple()) {
        let (mu, rest): (Vec<f64>, Vec<(f64, f64)>) = rows.iter().map(|&(m, s, y)| (m, (s, y))).unzip();
        let (sigma, y): (Vec<f64>, Vec<f64>) = rest.into_iter().unzip();
        let ps = PredictiveSet::new(mu, sigma, y).unwrap();
        let curve = calibration_curve(&ps, 100).unwrap();
        prop_assert!(curve.observed.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(curve.observed.iter().all(|o| (0.0..=1.0).contains(o)));
        let m = calibration_metrics(&curve);
        prop_assert!(m.rmsce + 1e-15 >= m.mace);
        prop_assert!((0.0..=1.0).contains(&m.ma));
    }

    #[test]
    fn metrics_are_permutation_invariant(rows in triple(), rot in 0usize..200) {
        let build = |r: &[(f64, f64, f64)]| {
            PredictiveSet::new(
                r.iter().map(|t| t.0).collect(),
                r.iter().map(|t| t.1).collect(),
                r.iter().map(|t| t.2).collect(),
            )
            .unwrap()
        };
        let mut shuffled = rows.clone();
        shuffled.rotate_left(rot % rows.len());
        shuffled.reverse();
        let a = calibration_metrics(&calibration_curve(&build(&rows), 100).unwrap());
        let b = calibration_metrics(&calibration_curve(&build(&shuffled), 100).unwrap());
        prop_assert!((a.ma - b.ma).abs() < 1e-12);
        prop_assert!((a.mace - b.mace).abs() < 1e-12);
        let pa = point_metrics(&build(&rows));
        let pb = point_metrics(&build(&shuffled));
        if let (Ok(pa), Ok(pb)) = (pa, pb) {
            prop_assert!((pa.mae - pb.mae).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_variance_dominates_mean_member_variance(
        members in proptest::collection::vec(proptest::collection::vec((-2.0f64..2.0, 0.01f64..2.0), 6), 1..6)
    ) {
        let mus: Vec<Vec<f64>> = members.iter().map(|m| m.iter().map(|p| p.0).collect()).collect();
        let sig: Vec<Vec<f64>> = members.iter().map(|m| m.iter().map(|p| p.1).collect()).collect();
        let pairs: Vec<(&[f64], &[f64])> = mus.iter().zip(&sig).map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
        let (mu, sigma) = ensemble_aggregate(&pairs, 1e-4).unwrap();
        let k = members.len() as f64;
        for i in 0..6 {
            let mean_mu = mus.iter().map(|m| m[i]).sum::<f64>() / k;
            prop_assert!((mu[i] - mean_mu).abs() < 1e-12);
            let mean_var = sig.iter().map(|s| s[i] * s[i]).sum::<f64>() / k;
            prop_assert!(sigma[i] * sigma[i] + 1e-12 >= mean_var);
        }
    }
}
