//! Ensemble aggregation, calibration and point metrics, and the rollout
//! evaluation protocol.

use crate::error::{Error, Result};
use crate::model::{RolloutMode, SurrogateModel};
use crate::pde::{make_bundled_windows, TrajectorySet};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::fmt::Write as _;
use std::path::Path;

pub const SIGMA_MIN: f64 = 1e-4;
pub const DEFAULT_BINS: usize = 100;
const INTERVAL_Z: f64 = 1.96;
const MAX_INTERVAL_RECORDS: usize = 2000;
/// Windows per forward batch during evaluation.
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub variant: String,
    pub mode: Option<RolloutMode>,
    pub step: Option<usize>,
}

/// Flattened predictions `μ`, `σ` against truth `y`, split into samples of
/// `sample_len` consecutive entries for the relative-L2 average.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSet {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub y: Vec<f64>,
    pub sample_len: usize,
    pub provenance: Provenance,
}

impl PredictiveSet {
    /// A single-sample set.
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = y.len();
        Self::with_samples(mu, sigma, y, n)
    }

    pub fn with_samples(mu: Vec<f64>, sigma: Vec<f64>, y: Vec<f64>, sample_len: usize) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::contract("predictive set is empty"));
        }
        if mu.len() != n || sigma.len() != n {
            return Err(Error::Dimension {
                op: "predictive_set",
                lhs: vec![mu.len(), sigma.len()],
                rhs: vec![n],
            });
        }
        if sample_len == 0 || !n.is_multiple_of(sample_len) {
            return Err(Error::contract(format!("sample length {sample_len} does not divide {n}")));
        }
        if mu.iter().chain(&sigma).chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::numeric("predictive set"));
        }
        if let Some(i) = sigma.iter().position(|&s| s <= 0.0) {
            return Err(Error::contract(format!("σ[{i}] = {} is not positive", sigma[i])));
        }
        Ok(PredictiveSet {
            mu,
            sigma,
            y,
            sample_len,
            provenance: Provenance::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Gaussian-mixture moments over members `(μ_i, σ_i)`. Deterministic members
/// pass `σ_i = 0`. The result is floored at `sigma_min`.
pub fn ensemble_aggregate(members: &[(&[f64], &[f64])], sigma_min: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (first, _) = members.first().ok_or_else(|| Error::contract("no ensemble members"))?;
    let n = first.len();
    if members.iter().any(|(m, s)| m.len() != n || s.len() != n) {
        return Err(Error::contract("ensemble members disagree in shape"));
    }
    let k = members.len() as f64;
    let mut mu = vec![0.0; n];
    let mut second = vec![0.0; n];
    for (m, s) in members {
        for i in 0..n {
            mu[i] += m[i];
            second[i] += s[i] * s[i] + m[i] * m[i];
        }
    }
    let sigma = (0..n)
        .map(|i| {
            mu[i] /= k;
            let var = second[i] / k - mu[i] * mu[i];
            var.max(0.0).sqrt().max(sigma_min)
        })
        .collect();
    Ok((mu, sigma))
}

/// Expected proportions `p_j` and observed proportions `o_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub expected: Vec<f64>,
    pub observed: Vec<f64>,
}

/// Streaming per-bin counts of predictive quantiles. Merging is exact, so
/// shards may be accumulated in any order.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCounts {
    expected: Vec<f64>,
    counts: Vec<u64>,
    n: u64,
}

impl CalibrationCounts {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::config("calibration needs at least 2 bins"));
        }
        let expected = (0..bins).map(|j| j as f64 / (bins - 1) as f64).collect();
        Ok(CalibrationCounts {
            expected,
            counts: vec![0; bins],
            n: 0,
        })
    }

    /// Records one observation by its predictive quantile `q = Φ((y−μ)/σ)`.
    pub fn push_quantile(&mut self, q: f64) {
        let bins = self.expected.len();
        let mut j = ((q * (bins - 1) as f64).ceil().max(0.0) as usize).min(bins);
        while j > 0 && self.expected[j - 1] >= q {
            j -= 1;
        }
        while j < bins && self.expected[j] < q {
            j += 1;
        }
        if j < bins {
            self.counts[j] += 1;
        }
        self.n += 1;
    }

    pub fn push(&mut self, mu: f64, sigma: f64, y: f64) {
        self.push_quantile(std_normal_cdf((y - mu) / sigma));
    }

    pub fn merge(&mut self, other: &CalibrationCounts) -> Result<()> {
        if other.expected.len() != self.expected.len() {
            return Err(Error::contract("cannot merge calibration counts with different bins"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.n += other.n;
        Ok(())
    }

    pub fn curve(&self) -> Result<CalibrationCurve> {
        if self.n == 0 {
            return Err(Error::contract("calibration curve of an empty set"));
        }
        let mut cum = 0u64;
        let observed = self
            .counts
            .iter()
            .map(|c| {
                cum += c;
                cum as f64 / self.n as f64
            })
            .collect();
        Ok(CalibrationCurve {
            expected: self.expected.clone(),
            observed,
        })
    }
}

pub fn std_normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// One-sided quantile calibration over `bins` uniformly spaced levels.
pub fn calibration_curve(ps: &PredictiveSet, bins: usize) -> Result<CalibrationCurve> {
    let mut counts = CalibrationCounts::new(bins)?;
    for i in 0..ps.len() {
        if !(ps.sigma[i] > 0.0) {
            return Err(Error::contract(format!("σ[{i}] is not positive")));
        }
        counts.push(ps.mu[i], ps.sigma[i], ps.y[i]);
    }
    counts.curve()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetrics {
    #[serde(rename = "MA")]
    pub ma: f64,
    #[serde(rename = "MACE")]
    pub mace: f64,
    #[serde(rename = "RMSCE")]
    pub rmsce: f64,
}

pub fn calibration_metrics(curve: &CalibrationCurve) -> CalibrationMetrics {
    let d: Vec<f64> = curve
        .expected
        .iter()
        .zip(&curve.observed)
        .map(|(p, o)| (o - p).abs())
        .collect();
    let n = d.len() as f64;
    let mace = d.iter().sum::<f64>() / n;
    let rmsce = (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let ma = curve
        .expected
        .windows(2)
        .zip(d.windows(2))
        .map(|(p, e)| 0.5 * (p[1] - p[0]) * (e[0] + e[1]))
        .sum();
    CalibrationMetrics { ma, mace, rmsce }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    #[serde(rename = "L2")]
    pub l2: f64,
    #[serde(rename = "MAE")]
    pub mae: f64,
}

/// Relative L2 averaged over samples, and MAE over all entries.
pub fn point_metrics(ps: &PredictiveSet) -> Result<PointMetrics> {
    let mut l2 = 0.0;
    let samples = ps.len() / ps.sample_len;
    for (k, (mu, y)) in ps.mu.chunks(ps.sample_len).zip(ps.y.chunks(ps.sample_len)).enumerate() {
        let den = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if den == 0.0 {
            return Err(Error::contract(format!("sample {k} has an all-zero target; relative L2 undefined")));
        }
        let num = mu.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        l2 += num / den;
    }
    let mae = ps.mu.iter().zip(&ps.y).map(|(a, b)| (a - b).abs()).sum::<f64>() / ps.len() as f64;
    Ok(PointMetrics {
        l2: l2 / samples as f64,
        mae,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub half_width: f64,
    pub center: f64,
    pub truth: f64,
}

/// Centered 95% intervals on an evenly spaced subsample, sorted by width.
pub fn ordered_intervals(ps: &PredictiveSet, max_records: usize) -> Vec<IntervalRecord> {
    let n = ps.len();
    let take = n.min(max_records.max(1));
    let mut out: Vec<IntervalRecord> = (0..take)
        .map(|k| {
            let i = k * n / take;
            IntervalRecord {
                half_width: INTERVAL_Z * ps.sigma[i],
                center: ps.mu[i],
                truth: ps.y[i],
            }
        })
        .collect();
    out.sort_by(|a, b| a.half_width.total_cmp(&b.half_width));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    #[serde(flatten)]
    pub calibration: CalibrationMetrics,
    #[serde(flatten)]
    pub point: PointMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub provenance: Provenance,
    pub n: usize,
    #[serde(flatten)]
    pub calibration: CalibrationMetrics,
    #[serde(flatten)]
    pub point: PointMetrics,
    pub curve: CalibrationCurve,
    pub intervals: Vec<IntervalRecord>,
    pub per_step: Vec<StepMetrics>,
}

impl CalibrationReport {
    pub fn from_set(ps: &PredictiveSet, bins: usize) -> Result<Self> {
        let curve = calibration_curve(ps, bins)?;
        Ok(CalibrationReport {
            provenance: ps.provenance.clone(),
            n: ps.len(),
            calibration: calibration_metrics(&curve),
            point: point_metrics(ps)?,
            curve,
            intervals: ordered_intervals(ps, MAX_INTERVAL_RECORDS),
            per_step: Vec::new(),
        })
    }

    pub fn ma(&self) -> f64 {
        self.calibration.ma
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `report.json`, `calibration_curve.csv`, `ordered_intervals.csv` and
    /// `per_step_metrics.csv` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;

        let mut s = String::from("expected,observed\n");
        for (p, o) in self.curve.expected.iter().zip(&self.curve.observed) {
            let _ = writeln!(s, "{p},{o}");
        }
        std::fs::write(dir.join("calibration_curve.csv"), s)?;

        let mut s = String::from("rank,half_width,center,truth\n");
        for (i, r) in self.intervals.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{}", r.half_width, r.center, r.truth);
        }
        std::fs::write(dir.join("ordered_intervals.csv"), s)?;

        let mut s = String::from("step,MA,MACE,RMSCE,L2,MAE\n");
        for m in &self.per_step {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                m.step, m.calibration.ma, m.calibration.mace, m.calibration.rmsce, m.point.l2, m.point.mae
            );
        }
        std::fs::write(dir.join("per_step_metrics.csv"), s)?;
        Ok(())
    }
}

/// Per-step aggregated predictions for a set of windows: `steps[m]` holds
/// `(μ*, σ*, y)` flattened over windows, each window contributing `S·N²` entries.
#[derive(Debug, Clone)]
pub struct RolloutPredictions {
    pub steps: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    pub sample_len: usize,
}

fn check_members(models: &[SurrogateModel]) -> Result<()> {
    let first = models.first().ok_or_else(|| Error::contract("no models to evaluate"))?.config();
    for m in models {
        let c = m.config();
        if c.grid != first.grid || c.history != first.history || c.bundle != first.bundle {
            return Err(Error::contract("ensemble members disagree in grid, history or bundling"));
        }
    }
    Ok(())
}

/// Runs every member over every window of `test` and aggregates per step.
pub fn predict_rollout(
    models: &[SurrogateModel],
    test: &TrajectorySet,
    mode: RolloutMode,
    horizon: usize,
) -> Result<RolloutPredictions> {
    check_members(models)?;
    let cfg = models[0].config();
    if cfg.grid != test.grid() {
        return Err(Error::contract(format!(
            "model grid {} differs from dataset grid {}",
            cfg.grid,
            test.grid()
        )));
    }
    let windows = make_bundled_windows(test, cfg.input_frames(), horizon, cfg.bundle)?;
    let sample_len = cfg.bundle * cfg.grid * cfg.grid;

    // member → step → (μ, σ) over all windows
    let per_member: Vec<Vec<(Vec<f64>, Vec<f64>)>> = models
        .par_iter()
        .map(|model| {
            let mut steps = vec![(Vec::new(), Vec::new()); horizon];
            for chunk in windows.chunks(EVAL_BATCH) {
                let init = Tensor::stack(&chunk.iter().map(|w| w.input.clone()).collect::<Vec<_>>())?;
                let truth = Tensor::stack(&chunk.iter().map(|w| w.target.clone()).collect::<Vec<_>>())?;
                let out = model.rollout(&init, None, horizon, mode, Some(&truth))?;
                for (m, p) in out.into_iter().enumerate() {
                    let n = p.mean.numel();
                    steps[m].0.extend_from_slice(p.mean.data());
                    match p.sigma {
                        Some(s) => steps[m].1.extend_from_slice(s.data()),
                        None => steps[m].1.extend(std::iter::repeat_n(0.0, n)),
                    }
                }
            }
            Ok(steps)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut steps = Vec::with_capacity(horizon);
    for m in 0..horizon {
        let members: Vec<(&[f64], &[f64])> = per_member
            .iter()
            .map(|s| (s[m].0.as_slice(), s[m].1.as_slice()))
            .collect();
        let (mu, sigma) = ensemble_aggregate(&members, SIGMA_MIN)?;
        let y: Vec<f64> = windows
            .iter()
            .flat_map(|w| w.target_step(m + 1).into_data())
            .collect();
        steps.push((mu, sigma, y));
    }
    Ok(RolloutPredictions { steps, sample_len })
}

/// Pooled metrics over all steps, windows and pixels, plus the per-step series.
pub fn evaluate_rollout(
    models: &[SurrogateModel],
    test: &TrajectorySet,
    mode: RolloutMode,
    horizon: usize,
) -> Result<CalibrationReport> {
    let preds = predict_rollout(models, test, mode, horizon)?;
    report_from_predictions(&preds, &models[0].config().variant.to_string(), mode)
}

pub fn report_from_predictions(preds: &RolloutPredictions, variant: &str, mode: RolloutMode) -> Result<CalibrationReport> {
    let mut per_step = Vec::with_capacity(preds.steps.len());
    let (mut mu, mut sigma, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (m, (smu, ssig, sy)) in preds.steps.iter().enumerate() {
        let ps = PredictiveSet::with_samples(smu.clone(), ssig.clone(), sy.clone(), preds.sample_len)?;
        let curve = calibration_curve(&ps, DEFAULT_BINS)?;
        per_step.push(StepMetrics {
            step: m + 1,
            calibration: calibration_metrics(&curve),
            point: point_metrics(&ps)?,
        });
        mu.extend_from_slice(smu);
        sigma.extend_from_slice(ssig);
        y.extend_from_slice(sy);
    }
    let mut ps = PredictiveSet::with_samples(mu, sigma, y, preds.sample_len)?;
    ps.provenance = Provenance {
        variant: variant.to_string(),
        mode: Some(mode),
        step: None,
    };
    let mut report = CalibrationReport::from_set(&ps, DEFAULT_BINS)?;
    report.per_step = per_step;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_closed_forms() {
        let (m, s) = ensemble_aggregate(&[(&[1.0][..], &[0.0][..]), (&[-1.0][..], &[0.0][..])], SIGMA_MIN).unwrap();
        assert_eq!(m, vec![0.0]);
        assert!((s[0] - 1.0).abs() < 1e-15);
        let (m, s) = ensemble_aggregate(&[(&[0.3][..], &[1e-6][..])], SIGMA_MIN).unwrap();
        assert_eq!((m[0], s[0]), (0.3, SIGMA_MIN));
        assert!(ensemble_aggregate(&[], SIGMA_MIN).is_err());
    }

    #[test]
    fn exact_prediction_steps_at_half() {
        let ps = PredictiveSet::new(vec![0.5; 10], vec![1.0; 10], vec![0.5; 10]).unwrap();
        let c = calibration_curve(&ps, 101).unwrap();
        for (p, o) in c.expected.iter().zip(&c.observed) {
            assert_eq!(*o, if *p >= 0.5 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn perfect_curve_scores_zero() {
        let p: Vec<f64> = (0..100).map(|j| j as f64 / 99.0).collect();
        let m = calibration_metrics(&CalibrationCurve {
            expected: p.clone(),
            observed: p,
        });
        assert_eq!((m.ma, m.mace, m.rmsce), (0.0, 0.0, 0.0));
    }

    #[test]
    fn point_metric_identities() {
        let y = vec![1.0, -2.0, 3.0, 0.5];
        let ps = PredictiveSet::new(y.clone(), vec![1.0; 4], y.clone()).unwrap();
        let m = point_metrics(&ps).unwrap();
        assert_eq!((m.l2, m.mae), (0.0, 0.0));
        let ps = PredictiveSet::new(y.iter().map(|v| 2.0 * v).collect(), vec![1.0; 4], y).unwrap();
        assert!((point_metrics(&ps).unwrap().l2 - 1.0).abs() < 1e-15);
        let ps = PredictiveSet::new(vec![1.0; 2], vec![1.0; 2], vec![0.0; 2]).unwrap();
        assert!(point_metrics(&ps).is_err());
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        assert!(PredictiveSet::new(vec![0.0], vec![0.0], vec![1.0]).is_err());
    }
}
