use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment state for the trainable entries of a [`ParamStore`], in
/// [`ParamStore::trainable`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor> = params
            .trainable()
            .into_iter()
            .map(|id| Tensor::zeros_like(params.get(id)))
            .collect();
        Self {
            hyper,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn check_matches(&self, params: &ParamStore) -> Result<()> {
        let ids = params.trainable();
        if ids.len() != self.m.len() || ids.len() != self.v.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer tracks {} tensors, model has {} trainable",
                self.m.len(),
                ids.len()
            )));
        }
        for ((id, m), v) in ids.iter().zip(&self.m).zip(&self.v) {
            let s = params.get(*id).shape();
            if m.shape() != s || v.shape() != s {
                return Err(Error::Checkpoint(format!(
                    "moment shape mismatch for {}",
                    params.param(*id).name
                )));
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update with learning rate `lr`.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let ids = params.trainable();
        if grads.len() != ids.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} trainable tensors",
                grads.len(),
                ids.len()
            )));
        }
        self.step += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, id) in ids.into_iter().enumerate() {
            let g = &grads[k];
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = params.value_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(Error::shape("adam", &[p.len()], &[g.len()]));
            }
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(vec![0.3, -0.7]).unwrap(), true)
            .unwrap();
        let before = s.clone();
        let mut opt = OptimizerState::new(&s, AdamHyper::default());
        opt.apply(&mut s, &[vec![0.0, 0.0]], 0.1).unwrap();
        assert_eq!(s, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first update lr * g / (|g| + eps)
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(vec![1.0, 1.0]).unwrap(), true)
            .unwrap();
        let mut opt = OptimizerState::new(&s, AdamHyper::default());
        opt.apply(&mut s, &[vec![2.0, -0.5]], 0.01).unwrap();
        let w = s.get(s.id("w").unwrap()).data();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn minimises_quadratic() {
        let mut s = ParamStore::new();
        let id = s
            .add("w", Tensor::from_vec(vec![3.0, -2.0]).unwrap(), true)
            .unwrap();
        let mut opt = OptimizerState::new(&s, AdamHyper::default());
        for _ in 0..2000 {
            let g: Vec<f64> = s.get(id).data().iter().map(|w| 2.0 * w).collect();
            opt.apply(&mut s, &[g], 0.05).unwrap();
        }
        assert!(s.get(id).data().iter().all(|w| w.abs() < 1e-3));
    }
}
