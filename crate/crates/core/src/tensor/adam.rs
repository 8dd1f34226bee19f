use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    /// Updates rejected because a gradient was not finite.
    pub skipped: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            skipped: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update. Returns `false` (and counts a skipped step) when
    /// any gradient entry is NaN or infinite; parameters are then untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<bool> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || self.m[i].len() != g.len() {
                return Err(Error::shape("adam", p.shape(), &[g.len()]));
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(true)
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor> {
        vec![Tensor::new(&[1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut params = vec![Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5)];
        let before = params.clone();
        let mut st = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..25 {
            assert!(st.step(&mut params, &[vec![0.0; 6]]).unwrap());
        }
        assert_eq!(params, before);
        assert_eq!(st.step, 25);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so Δ = lr·g/(|g| + ε).
        let lr = 1e-3;
        let g = 0.37;
        let mut p = scalar_param(1.0);
        let mut st = AdamState::new(
            AdamConfig {
                learning_rate: lr,
                ..Default::default()
            },
            &p,
        );
        st.step(&mut p, &[vec![g]]).unwrap();
        let expected = 1.0 - lr * g / (g + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
        assert!(((1.0 - p[0].item()) - lr).abs() < 1e-10);
    }

    #[test]
    fn second_identical_step_also_moves_by_learning_rate() {
        // After two equal gradients both moments are exactly g and g² once
        // bias-corrected, so the second update equals the first.
        let lr = 1e-3;
        let mut p = scalar_param(0.0);
        let mut st = AdamState::new(
            AdamConfig {
                learning_rate: lr,
                ..Default::default()
            },
            &p,
        );
        st.step(&mut p, &[vec![-2.0]]).unwrap();
        let after_one = p[0].item();
        st.step(&mut p, &[vec![-2.0]]).unwrap();
        let second = p[0].item() - after_one;
        assert!(second > 0.0);
        assert!((second - lr).abs() < 1e-10);
    }

    #[test]
    fn nan_gradient_skips_update() {
        let mut p = scalar_param(1.0);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(!st.step(&mut p, &[vec![f64::NAN]]).unwrap());
        assert_eq!(st.step, 0);
        assert_eq!(st.skipped, 1);
        assert_eq!(p[0].item(), 1.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
