use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are allocated lazily on the first
/// step to match the parameter list they are driven with.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter slice from its gradient.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    lhs: vec![p.len()],
                    rhs: vec![g.len()],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = AdamState::default();
        let mut p = vec![1.0, -2.0];
        adam.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = AdamState::default();
        let c = 0.37;
        let mut p = vec![0.0];
        adam.step(&mut [&mut p], &[&[c]]).unwrap();
        // m̂ = c, v̂ = c²: Δ = −lr·c/(c+ε)
        let expected = -1e-3 * c / (c + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] + 1e-3).abs() < 1e-6);
    }

    #[test]
    fn two_step_recurrence() {
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let g = -0.8;
        let mut theta = 0.25;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - f64::powi(b1, t));
            let vhat = v / (1.0 - f64::powi(b2, t));
            theta -= lr * mhat / (vhat.sqrt() + eps);
        }
        let mut adam = AdamState::default();
        let mut p = vec![0.25];
        adam.step(&mut [&mut p], &[&[g]]).unwrap();
        adam.step(&mut [&mut p], &[&[g]]).unwrap();
        assert!((p[0] - theta).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = AdamState::default();
        let mut p = vec![0.0; 2];
        assert!(adam.step(&mut [&mut p], &[&[1.0]]).is_err());
    }
}
