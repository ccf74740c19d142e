use super::tensor::{ParamStore, Precision};
use super::{AutogradError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// The usual DCGAN setting.
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for every tensor of one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect::<Vec<_>>();
        AdamState { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one bias-corrected Adam update from the gradients currently in
    /// `params`. Gradients are left in place; callers zero them.
    pub fn step(&mut self, params: &mut ParamStore, precision: Precision) -> Result<()> {
        if self.m.len() != params.len()
            || params.tensors().iter().zip(&self.m).any(|(t, m)| t.numel() != m.len())
        {
            return Err(AutogradError::ShapeMismatch {
                op: "adam_step",
                detail: format!("optimizer tracks {} tensors, store has {}", self.m.len(), params.len()),
            });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((tensor, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else { continue };
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] = precision.round(data[i] - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new(vec![1], vec![value]).unwrap());
        s.get_mut(id).accumulate_grad(&[grad]);
        s
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        for g in [3.0, -0.01] {
            let mut s = store_with(1.0, g);
            let mut adam = AdamState::new(AdamConfig::default(), &s);
            adam.step(&mut s, Precision::F64).unwrap();
            let delta = s.tensors()[0].data()[0] - 1.0;
            assert!((delta + 2e-4 * g.signum()).abs() < 1e-9, "delta {delta}");
            assert_eq!(adam.step, 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with(0.75, 0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        for _ in 0..5 {
            adam.step(&mut s, Precision::F64).unwrap();
        }
        assert_eq!(s.tensors()[0].data()[0], 0.75);
        assert!(adam.v.iter().flatten().all(|v| *v >= 0.0));
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let s = store_with(1.0, 1.0);
        let mut other = store_with(1.0, 1.0);
        other.add("q", Tensor::zeros(vec![3]));
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        assert!(adam.step(&mut other, Precision::F64).is_err());
    }

    #[test]
    fn defaults_match_dcgan() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2, c.eps), (2e-4, 0.5, 0.999, 1e-8));
    }
}
