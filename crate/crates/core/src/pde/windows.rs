use super::dataset::TrajectorySet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A contiguous slice of one trajectory: `history` input frames followed by
/// `horizon` bundles of `bundle` target frames.
#[derive(Debug, Clone, PartialEq)]
pub struct BundledWindow {
    pub trajectory: usize,
    pub start: usize,
    pub bundle: usize,
    /// `[history, N, N]`
    pub input: Tensor,
    /// `[horizon·bundle, N, N]`
    pub target: Tensor,
}

impl BundledWindow {
    pub fn history(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.target.shape()[0] / self.bundle
    }

    pub fn grid(&self) -> usize {
        self.input.shape()[1]
    }

    /// Target bundle for rollout step `m` (1-based), `[bundle, N, N]`.
    pub fn target_step(&self, m: usize) -> Tensor {
        let n = self.grid();
        let len = self.bundle * n * n;
        let data = self.target.data()[(m - 1) * len..m * len].to_vec();
        Tensor::from_raw(vec![self.bundle, n, n], data)
    }

    /// Input block shifted forward by `m` bundles, i.e. the history that ends
    /// with target bundle `m`. `m = 0` is the input itself.
    pub fn shifted_input(&self, m: usize) -> Tensor {
        let n = self.grid();
        let nn = n * n;
        let h = self.history();
        let shift = m * self.bundle;
        let mut data = Vec::with_capacity(h * nn);
        for f in shift..shift + h {
            if f < h {
                data.extend_from_slice(&self.input.data()[f * nn..(f + 1) * nn]);
            } else {
                let g = f - h;
                data.extend_from_slice(&self.target.data()[g * nn..(g + 1) * nn]);
            }
        }
        Tensor::from_raw(vec![h, n, n], data)
    }
}

/// All maximal sliding windows, `T_snap − history − horizon·bundle + 1` per trajectory.
pub fn make_bundled_windows(
    ts: &TrajectorySet,
    history: usize,
    horizon: usize,
    bundle: usize,
) -> Result<Vec<BundledWindow>> {
    let t = ts.snapshots();
    if history == 0 || horizon == 0 || bundle == 0 || history + horizon * bundle > t {
        return Err(Error::config(format!(
            "window needs history ≥ 1, horizon ≥ 1, bundle ≥ 1 and history + horizon·bundle ≤ T_snap \
             (got {history} + {horizon}·{bundle} vs {t})"
        )));
    }
    let n = ts.grid();
    let span = history + horizon * bundle;
    let mut out = Vec::with_capacity(ts.len() * (t - span + 1));
    for traj in 0..ts.len() {
        for start in 0..=t - span {
            out.push(BundledWindow {
                trajectory: traj,
                start,
                bundle,
                input: Tensor::from_raw(vec![history, n, n], ts.frames(traj, start, history).to_vec()),
                target: Tensor::from_raw(
                    vec![horizon * bundle, n, n],
                    ts.frames(traj, start + history, horizon * bundle).to_vec(),
                ),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{SolverConfig, Split};

    fn tagged(n_traj: usize, t: usize) -> TrajectorySet {
        let cfg = SolverConfig {
            grid: 4,
            snapshots: t,
            ..SolverConfig::default()
        };
        // value encodes (trajectory, time)
        let states = (0..n_traj)
            .flat_map(|i| (0..t).flat_map(move |s| std::iter::repeat_n((i * 1000 + s) as f64, 16)))
            .collect();
        TrajectorySet::new(cfg, Split::Train, n_traj, states).unwrap()
    }

    #[test]
    fn counts() {
        let ts = tagged(3, 20);
        assert_eq!(make_bundled_windows(&ts, 10, 10, 1).unwrap().len(), 3);
        assert_eq!(make_bundled_windows(&ts, 10, 1, 1).unwrap().len(), 30);
        let w = make_bundled_windows(&ts, 2, 3, 2).unwrap();
        assert_eq!(w.len(), 3 * 13);
        assert_eq!(w[0].target.shape()[0], 6);
        assert!(make_bundled_windows(&ts, 10, 6, 2).is_err());
    }

    #[test]
    fn windows_stay_inside_their_trajectory() {
        let ts = tagged(4, 20);
        for w in make_bundled_windows(&ts, 3, 4, 2).unwrap() {
            let base = (w.trajectory * 1000) as f64;
            let all: Vec<f64> = w.input.data().iter().chain(w.target.data()).copied().collect();
            for (k, frame) in all.chunks(16).enumerate() {
                assert!(frame.iter().all(|v| *v == base + (w.start + k) as f64));
            }
        }
    }

    #[test]
    fn shifted_input_matches_source() {
        let ts = tagged(1, 20);
        let w = &make_bundled_windows(&ts, 3, 4, 2).unwrap()[5];
        for m in 0..=4 {
            let s = w.shifted_input(m);
            let expect = ts.frames(0, w.start + 2 * m, 3);
            assert_eq!(s.data(), expect);
        }
        assert_eq!(w.target_step(2).data(), ts.frames(0, w.start + 3 + 2, 2));
    }
}
