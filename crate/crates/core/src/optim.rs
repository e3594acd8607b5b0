use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: Float,
    pub momentum: Float,
    pub weight_decay: Float,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and coupled L2 weight decay:
///
/// `v <- momentum * v + (grad + weight_decay * param)`, `param <- param - lr * v`.
///
/// Decay only touches [`ParamKind::Weight`] and trained [`ParamKind::Frozen`]
/// tensors; norm parameters and the temperature are exempt.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// Velocity buffers keyed by parameter position (absent = never stepped).
    pub fn buffers(&self) -> &[Option<Tensor>] {
        &self.velocity
    }

    pub fn set_buffers(&mut self, buffers: Vec<Option<Tensor>>) {
        self.velocity = buffers;
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter of the
    /// store; `None` leaves that parameter untouched.
    pub fn step(&mut self, cfg: &SgdConfig, store: &mut ParamStore, grads: &[Option<Vec<Float>>]) -> Result<()> {
        cfg.validate()?;
        if grads.len() != store.len() {
            return Err(Error::shape("sgd_momentum_step", &[store.len()], &[grads.len()]));
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for ((_, param), (grad, vel)) in store.iter_mut().zip(grads.iter().zip(self.velocity.iter_mut())) {
            let Some(grad) = grad else { continue };
            if grad.len() != param.value.numel() {
                return Err(Error::shape("sgd_momentum_step", param.value.shape(), &[grad.len()]));
            }
            let decay = match param.kind {
                ParamKind::NoDecay => 0.0,
                ParamKind::Weight | ParamKind::Frozen => cfg.weight_decay,
            };
            let v = vel.get_or_insert_with(|| Tensor::zeros(param.value.shape()));
            for ((p, g), vv) in param.value.data_mut().iter_mut().zip(grad).zip(v.data_mut()) {
                *vv = cfg.momentum * *vv + (g + decay * *p);
                *p -= cfg.lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn store_with(value: Float, kind: ParamKind) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(value), kind);
        s
    }

    #[test]
    fn plain_gradient_descent() {
        let mut s = store_with(2.0, ParamKind::Weight);
        let cfg = SgdConfig { lr: 0.5, momentum: 0.0, weight_decay: 0.0 };
        Sgd::new().step(&cfg, &mut s, &[Some(vec![3.0])]).unwrap();
        assert_eq!(s.by_name("p").unwrap().value.data(), &[0.5]);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store_with(2.0, ParamKind::Weight);
        let cfg = SgdConfig { lr: 0.5, momentum: 0.9, weight_decay: 0.0 };
        Sgd::new().step(&cfg, &mut s, &[Some(vec![0.0])]).unwrap();
        assert_eq!(s.by_name("p").unwrap().value.data(), &[2.0]);
    }

    #[test]
    fn two_momentum_steps() {
        let mut s = store_with(1.0, ParamKind::Weight);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut opt = Sgd::new();
        opt.step(&cfg, &mut s, &[Some(vec![1.0])]).unwrap();
        assert!((s.by_name("p").unwrap().value.data()[0] - 0.9).abs() < 1e-6);
        opt.step(&cfg, &mut s, &[Some(vec![1.0])]).unwrap();
        assert!((s.by_name("p").unwrap().value.data()[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn decay_skips_no_decay_params() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.5 };
        let mut w = store_with(1.0, ParamKind::Weight);
        Sgd::new().step(&cfg, &mut w, &[Some(vec![0.0])]).unwrap();
        assert!((w.by_name("p").unwrap().value.data()[0] - 0.95).abs() < 1e-6);
        let mut n = store_with(1.0, ParamKind::NoDecay);
        Sgd::new().step(&cfg, &mut n, &[Some(vec![0.0])]).unwrap();
        assert_eq!(n.by_name("p").unwrap().value.data(), &[1.0]);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut s = store_with(1.0, ParamKind::Weight);
        let cfg = SgdConfig { lr: 0.0, momentum: 0.0, weight_decay: 0.0 };
        assert!(matches!(Sgd::new().step(&cfg, &mut s, &[None]), Err(Error::Config(_))));
    }
}
