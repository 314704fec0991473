use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to
/// `min_ratio · peak` at step `total`.
pub fn learning_rate(step: usize, total: usize, warmup: usize, peak: f64, min_ratio: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup.min(step)) as f64 / span).min(1.0);
    let floor = peak * min_ratio;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`
/// (`max_norm <= 0` disables clipping). Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    adam: AdamParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, adam: AdamParams, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            kind,
            adam,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update. Adam steps are clamped element-wise to `lr` so the
    /// update magnitude never exceeds the learning rate.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.adam;
        let (c1, c2) = (1.0 - beta1.powi(self.t), 1.0 - beta2.powi(self.t));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => data.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g),
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..data.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        let u = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        data[j] -= lr * u.clamp(-1.0, 1.0);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_shape() {
        assert!((learning_rate(0, 100, 10, 1.0, 0.1) - 0.1).abs() < 1e-12);
        assert!((learning_rate(9, 100, 10, 1.0, 0.1) - 1.0).abs() < 1e-12);
        assert!((learning_rate(10, 100, 10, 1.0, 0.1) - 1.0).abs() < 1e-12);
        assert!((learning_rate(100, 100, 10, 1.0, 0.1) - 0.1).abs() < 1e-12);
        assert!((learning_rate(55, 100, 10, 1.0, 0.0) - 0.5).abs() < 1e-12);
        assert_eq!(learning_rate(3, 10, 0, 0.0, 0.1), 0.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
        let mut g = vec![vec![0.3]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0][0], 0.3);
        let mut g = vec![vec![30.0]];
        clip_global_norm(&mut g, 0.0);
        assert_eq!(g[0][0], 30.0);
    }

    #[test]
    fn sgd_is_minus_lr_times_grad() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, AdamParams::default(), &p);
        opt.step(&mut p, &[vec![0.5, -1.0]], 0.1);
        assert_eq!(p[0].data(), &[1.0 - 0.1 * 0.5, 2.0 + 0.1]);
    }

    #[test]
    fn first_adam_step_is_sign_times_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()];
        let mut opt = Optimizer::new(OptimizerKind::Adam, AdamParams::default(), &p);
        opt.step(&mut p, &[vec![3.0, -0.2]], 0.01);
        assert!((p[0].data()[0] + 0.01).abs() < 1e-9);
        assert!((p[0].data()[1] - 0.01).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn adam_update_bounded_by_lr(
            grads in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 3), 1..30),
            lr in 1e-5f64..1.0,
        ) {
            let mut p = vec![Tensor::zeros(vec![3])];
            let mut opt = Optimizer::new(OptimizerKind::Adam, AdamParams::default(), &p);
            for g in &grads {
                let before = p[0].data().to_vec();
                opt.step(&mut p, &[g.clone()], lr);
                for (a, b) in before.iter().zip(p[0].data()) {
                    prop_assert!((a - b).abs() <= lr * (1.0 + 1e-12));
                }
            }
        }
    }
}
