mod common;

use common::tiny_config;
use leuq_core::inverse_opt::{inverse_uq, InverseProblem, InverseRoute};
use leuq_core::model::{RolloutMode, SurrogateModel};
use leuq_core::pde::{generate_dataset, load_dataset, make_bundled_windows, save_dataset, SolverConfig, TrajectorySet};
use leuq_core::tensor::{load_params, save_params, Tensor};
use leuq_core::training::{train_ensemble, TrainRunConfig};
use leuq_core::uq_eval::{evaluate_rollout, CalibrationReport};

fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn data(seed: u64) -> (TrajectorySet, TrajectorySet) {
    let cfg = SolverConfig {
        grid: 8,
        dt: 1e-2,
        snapshot_interval: 0.1,
        snapshots: 8,
        seed,
        ..SolverConfig::default()
    };
    generate_dataset(&cfg, 3, 2).unwrap()
}

fn ensemble(train: &TrajectorySet) -> Vec<SurrogateModel> {
    let windows = make_bundled_windows(train, 2, 2, 1).unwrap();
    let cfg = TrainRunConfig {
        epochs: 2,
        batch_size: 4,
        ensemble: 2,
        seed: 9,
        ..TrainRunConfig::default()
    };
    train_ensemble(&windows, &cfg, &tiny_config("latent+sigma+zsigma", 8))
        .unwrap()
        .into_iter()
        .map(|t| t.model)
        .collect()
}

#[test]
fn pipeline_is_bit_reproducible() {
    let (train, test) = data(5);
    let (train2, test2) = data(5);
    assert_eq!(bits(train.data()), bits(train2.data()));
    assert_eq!(bits(test.data()), bits(test2.data()));

    let a = ensemble(&train);
    let b = ensemble(&train2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.checksum(), y.checksum());
    }

    let ra = evaluate_rollout(&a, &test, RolloutMode::Autoregressive, 2).unwrap();
    let rb = evaluate_rollout(&b, &test2, RolloutMode::Autoregressive, 2).unwrap();
    assert_eq!(ra.to_json().unwrap(), rb.to_json().unwrap());

    let obs = Tensor::new(vec![2, 1, 8, 8], test.frames(0, 2, 2).to_vec()).unwrap();
    let mut prob = InverseProblem::new(obs, 1, 2);
    prob.iterations = 20;
    prob.truth = Some(Tensor::new(vec![1, 8, 8], test.frame(0, 1).to_vec()).unwrap());
    for route in [InverseRoute::Latent, InverseRoute::Input] {
        let ia = inverse_uq(&a, &prob, route).unwrap();
        let ib = inverse_uq(&b, &prob, route).unwrap();
        assert_eq!(bits(ia.mean.data()), bits(ib.mean.data()));
        assert_eq!(bits(ia.sigma.data()), bits(ib.sigma.data()));
        for (x, y) in ia.members.iter().zip(&ib.members) {
            assert_eq!(bits(&x.trace), bits(&y.trace));
        }
    }
}

#[test]
fn file_formats_roundtrip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = data(6);
    for (name, ts) in [("train.bin", &train), ("test.bin", &test)] {
        let path = dir.path().join(name);
        save_dataset(ts, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(bits(back.data()), bits(ts.data()));
        assert_eq!(back.config, ts.config);
        assert_eq!(back.split, ts.split);
    }

    let models = ensemble(&train);
    let path = dir.path().join("m.ckpt");
    models[0].save(&path).unwrap();
    let back = SurrogateModel::load(&path).unwrap();
    assert_eq!(back.checksum(), models[0].checksum());
    for ((na, ta), (nb, tb)) in back.params().iter().zip(models[0].params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(bits(ta.data()), bits(tb.data()));
    }

    let path = dir.path().join("raw.params");
    save_params(&path, models[1].params(), serde_json::json!({"note": "raw"})).unwrap();
    let (store, meta) = load_params(&path).unwrap();
    assert_eq!(&store, models[1].params());
    assert_eq!(meta["note"], "raw");

    let report = evaluate_rollout(&models, &test, RolloutMode::TeacherForcing, 2).unwrap();
    let json = report.to_json().unwrap();
    let back = CalibrationReport::from_json(&json).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.to_json().unwrap(), json);
    report.write(dir.path().join("eval")).unwrap();
    let on_disk = std::fs::read_to_string(dir.path().join("eval/report.json")).unwrap();
    assert_eq!(CalibrationReport::from_json(&on_disk).unwrap(), report);
}
