use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one update using the gradients stored on `params`.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.first_moment.len() != params.len() {
            return Err(Error::dim(
                "adam_step",
                &[self.first_moment.len()],
                &[params.len()],
            ));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            let n = p.numel();
            let (m, v) = (&mut self.first_moment[id.index()], &mut self.second_moment[id.index()]);
            if m.len() != n || v.len() != n {
                return Err(Error::dim("adam_step", p.shape(), &[m.len()]));
            }
            let grad = match p.grad.take() {
                Some(g) if g.len() != n => return Err(Error::dim("adam_step", p.shape(), &[g.len()])),
                Some(g) => g,
                None => vec![0.0; n],
            };
            let data = p.data_mut();
            for j in 0..n {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(values)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store(vec![0.5, -1.0]);
        let before = s.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        let id = s.id_of("w").unwrap();
        s.get_mut(id).grad = Some(vec![0.0, 0.0]);
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(id).data(), before.get(id).data());
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn single_step_matches_closed_form() {
        let mut s = store(vec![1.0]);
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr, 3e-5);
        let mut adam = AdamState::new(cfg, &s);
        let id = s.id_of("w").unwrap();
        s.get_mut(id).grad = Some(vec![1.0]);
        adam.step(&mut s).unwrap();
        // m = 0.1, v = 0.001; bias-corrected both give 1.0.
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat: f64 = 0.001 / (1.0 - 0.999);
        let expected = 1.0 - 3e-5 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
        assert!((s.get(id).data()[0] - (1.0 - 3e-5 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn gradient_shape_mismatch_is_rejected() {
        let mut s = store(vec![1.0, 2.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        let id = s.id_of("w").unwrap();
        s.get_mut(id).grad = Some(vec![1.0]);
        assert!(matches!(adam.step(&mut s), Err(Error::Dimension { .. })));
    }

    #[test]
    fn step_counter_increments() {
        let mut s = store(vec![1.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        for k in 1..=3 {
            adam.step(&mut s).unwrap();
            assert_eq!(adam.step, k);
        }
    }
}
