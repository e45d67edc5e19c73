//! AdamW with decoupled weight decay.

#[cfg(not(feature = "std"))]
use num_traits::Float;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moments per trainable tensor plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub config: AdamWConfig,
    pub lr: f64,
    pub step: u64,
    /// `(parameter, first moment, second moment)` in store order.
    pub moments: Vec<(ParamId, Vec<F>, Vec<F>)>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(store: &ParamStore<F>, lr: f64, config: AdamWConfig) -> Self {
        let moments = store
            .trainable()
            .map(|(id, p)| {
                let n = p.tensor.numel();
                (id, alloc::vec![F::zero(); n], alloc::vec![F::zero(); n])
            })
            .collect();
        OptimizerState {
            config,
            lr,
            step: 0,
            moments,
        }
    }

    /// One update of every tracked trainable tensor.
    ///
    /// Frozen tensors (`requires_grad == false`) are skipped; tracked tensors
    /// without a gradient buffer are reported together as an error.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        let missing: Vec<String> = self
            .moments
            .iter()
            .filter(|(id, _, _)| {
                let t = store.get(*id);
                t.requires_grad() && t.grad().is_none()
            })
            .map(|(id, _, _)| String::from(store.name(*id)))
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingGradients(missing));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2: f64 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let decay = F::lit(1.0 - self.lr * c.weight_decay);
        let step_size = F::lit(self.lr / bc1);
        let bc2_sqrt = F::lit(bc2.sqrt());
        let eps = F::lit(c.eps);

        for (id, m, v) in &mut self.moments {
            let tensor = store.get_mut(*id);
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            for (((w, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (F::one() - b1) * *g;
                *v = b2 * *v + (F::one() - b2) * *g * *g;
                *w = *w * decay - step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// Checks that the moment buffers still line up with the store.
    pub fn matches(&self, store: &ParamStore<F>) -> bool {
        let trainable: Vec<_> = store.trainable().collect();
        trainable.len() == self.moments.len()
            && trainable.iter().zip(&self.moments).all(|((id, p), (mid, m, v))| {
                id == mid && p.kind == ParamKind::Trainable && m.len() == p.tensor.numel() && v.len() == m.len()
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(&[2], alloc::vec![w, -w]).unwrap(), ParamKind::Trainable);
        (s, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let (mut s, id) = single(1.5);
        s.get_mut(id).accumulate_grad(&[0.0, 0.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&s, 0.1, cfg);
        for _ in 0..3 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.get(id).data(), &[1.5, -1.5]);
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn decoupled_decay_scales_weights() {
        let (mut s, id) = single(2.0);
        s.get_mut(id).accumulate_grad(&[0.0, 0.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&s, 0.1, cfg);
        opt.step(&mut s).unwrap();
        let expect = 2.0 * (1.0 - 0.1 * 0.01);
        assert!((s.get(id).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn positive_gradient_decreases_weight() {
        let (mut s, id) = single(1.0);
        s.get_mut(id).accumulate_grad(&[1.0, 1.0]);
        let mut opt = OptimizerState::new(&s, 0.1, AdamWConfig::default());
        opt.step(&mut s).unwrap();
        assert!(s.get(id).data()[0] < 1.0);
        // bias-corrected first step moves by ~lr
        assert!((s.get(id).data()[0] - (1.0 * (1.0 - 1e-5) - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn missing_gradients_listed() {
        let (mut s, _) = single(1.0);
        s.add("other", Tensor::zeros(&[1]), ParamKind::Trainable);
        let mut opt = OptimizerState::new(&s, 0.1, AdamWConfig::default());
        match opt.step(&mut s) {
            Err(Error::MissingGradients(names)) => assert_eq!(names, ["w", "other"]),
            other => panic!("{other:?}"),
        }
        assert_eq!(opt.step, 0);
    }
}
