use super::params::{ParamGrads, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Each step first shrinks every parameter by `lr * wd * p`, then applies the
/// bias-corrected Adam update computed from the raw gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        if grads.grads.len() != params.len() {
            return Err(Error::dim("adam_step", &[params.len()], &[grads.grads.len()]));
        }
        for (id, name, value) in params.iter() {
            let g = grads.get(id);
            if g.shape() != value.shape() {
                return Err(Error::dim("adam_step", value.shape(), g.shape()));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient for parameter {name}")));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            weight_decay: wd,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);

        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.first_moment[id.0].data_mut();
            let v = self.second_moment[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                p[i] -= lr * wd * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamId;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    fn grad(value: f64) -> ParamGrads {
        ParamGrads {
            grads: vec![Tensor::scalar(value)],
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = single(0.7);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p);
        adam.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get(ParamId(0)).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(0.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p);
        adam.step(&mut p, &grad(1.0)).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p.get(ParamId(0)).item() - expected).abs() < 1e-18);
    }

    #[test]
    fn decay_only_step() {
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &grad(0.0)).unwrap();
        assert!((p.get(ParamId(0)).item() - (1.0 - 1e-7)).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &grad(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::Training(ref m) if m.contains('w')));
        assert_eq!(adam.step_count(), 0);
    }
}
