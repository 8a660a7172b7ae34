//! SGD with momentum and weight decay, plus step learning-rate schedules.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamKind, ParamStore, Real, Tensor};

/// Optimizer hyperparameters and per-parameter velocity buffers.
#[derive(Clone, Debug)]
pub struct SgdState<S: Real = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: IndexMap<String, Tensor<S>>,
}

impl<S: Real> SgdState<S> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("sgd", format!("lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("sgd", format!("momentum must be in [0,1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid("sgd", format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(SgdState { lr, momentum, weight_decay, velocity: IndexMap::new() })
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<S>> {
        self.velocity.get(name)
    }
}

/// One update over every trainable parameter:
/// `g' = g + wd·w` (weights only), `v = m·v + g'`, `w -= lr·v`.
pub fn sgd_step<S: Real>(params: &mut ParamStore<S>, state: &mut SgdState<S>) -> Result<()> {
    let missing: Vec<String> =
        params.iter().filter(|(_, p)| p.requires_grad && p.grad.is_none()).map(|(n, _)| n.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::invalid("sgd_step", format!("missing gradient for {}", missing.join(", "))));
    }
    let lr = S::cast_from(state.lr);
    let m = S::cast_from(state.momentum);
    for (name, p) in params.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        let wd = if p.kind == ParamKind::Weight { S::cast_from(state.weight_decay) } else { S::zero() };
        let grad = p.grad.as_ref().expect("checked above");
        let v = state.velocity.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
        if v.shape() != p.value.shape() {
            return Err(Error::shape("sgd_step", p.value.shape(), v.shape()));
        }
        let w = p.value.data_mut();
        for ((wi, vi), &gi) in w.iter_mut().zip(v.data_mut()).zip(grad.data()) {
            let g = gi + wd * *wi;
            *vi = m * *vi + g;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// `lr(epoch) = base_lr · gamma^floor(epoch / step_epochs)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub gamma: f64,
    pub step_epochs: usize,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = epoch.checked_div(self.step_epochs).unwrap_or(0);
        self.base_lr * self.gamma.powi(drops as i32)
    }
}

pub fn lr_at(schedule: &StepSchedule, epoch: usize) -> f64 {
    schedule.lr_at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(w: f32, g: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w), ParamKind::Weight);
        s.get_mut("w").unwrap().grad = Some(Tensor::scalar(g));
        s
    }

    fn w(s: &ParamStore<f32>) -> f32 {
        s.value("w").unwrap().item()
    }

    #[test]
    fn plain_step() {
        let mut p = single(1.0, 0.5);
        let mut st = SgdState::new(0.1, 0.0, 0.0).unwrap();
        sgd_step(&mut p, &mut st).unwrap();
        assert!((w(&p) - 0.95).abs() < 1e-7);
    }

    #[test]
    fn momentum_hand_iteration() {
        let mut p = single(0.0, 1.0);
        let mut st = SgdState::new(0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &mut st).unwrap();
        assert!((w(&p) + 0.1).abs() < 1e-7);
        sgd_step(&mut p, &mut st).unwrap();
        assert!((st.velocity("w").unwrap().item() - 1.9).abs() < 1e-6);
        assert!((w(&p) + 0.29).abs() < 1e-6);
    }

    #[test]
    fn decay_only() {
        let mut p = single(1.0, 0.0);
        let mut st = SgdState::new(0.1, 0.0, 0.1).unwrap();
        sgd_step(&mut p, &mut st).unwrap();
        assert!((w(&p) - 0.99).abs() < 1e-7);
    }

    #[test]
    fn decay_skips_norm_and_bias() {
        let mut p = ParamStore::<f32>::new();
        p.insert("gamma", Tensor::scalar(1.0), ParamKind::NormScale);
        p.insert("b", Tensor::scalar(1.0), ParamKind::Bias);
        p.insert("rm", Tensor::scalar(3.0), ParamKind::RunningMean);
        for n in ["gamma", "b"] {
            p.get_mut(n).unwrap().grad = Some(Tensor::scalar(0.0));
        }
        let mut st = SgdState::new(0.1, 0.0, 0.5).unwrap();
        sgd_step(&mut p, &mut st).unwrap();
        assert_eq!(p.value("gamma").unwrap().item(), 1.0);
        assert_eq!(p.value("b").unwrap().item(), 1.0);
        assert_eq!(p.value("rm").unwrap().item(), 3.0);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut p = single(1.0, 0.0);
        p.get_mut("w").unwrap().grad = None;
        let mut st = SgdState::new(0.1, 0.0, 0.0).unwrap();
        assert!(sgd_step(&mut p, &mut st).is_err());
        assert_eq!(w(&p), 1.0);
    }

    #[test]
    fn bad_hyperparameters_rejected() {
        assert!(SgdState::<f32>::new(0.0, 0.0, 0.0).is_err());
        assert!(SgdState::<f32>::new(0.1, 1.0, 0.0).is_err());
        assert!(SgdState::<f32>::new(0.1, 0.0, -1.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = StepSchedule { base_lr: 0.01, gamma: 0.1, step_epochs: 10 };
        assert_eq!(lr_at(&s, 0), 0.01);
        assert_eq!(lr_at(&s, 9), 0.01);
        assert!((lr_at(&s, 10) - 0.001).abs() < 1e-15);
        let f = StepSchedule { base_lr: 0.002, gamma: 0.1, step_epochs: 2 };
        assert!((lr_at(&f, 2) - 0.0002).abs() < 1e-15);
        assert!((lr_at(&f, 1) - 0.002).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn plain_sgd_is_exact(ws in prop::collection::vec(-10.0f32..10.0, 1..16),
                              seed in 0u64..1000, lr in 1e-4f64..1.0) {
            let gs: Vec<f32> = ws.iter().enumerate()
                .map(|(i, _)| (((seed as usize + i) * 7919) % 97) as f32 / 97.0 - 0.5)
                .collect();
            let mut p = ParamStore::new();
            p.insert("w", Tensor::new([ws.len()], ws.clone()).unwrap(), ParamKind::Weight);
            p.get_mut("w").unwrap().grad = Some(Tensor::new([gs.len()], gs.clone()).unwrap());
            let mut st = SgdState::new(lr, 0.0, 0.0).unwrap();
            sgd_step(&mut p, &mut st).unwrap();
            let lr32 = lr as f32;
            for ((a, w0), g) in p.value("w").unwrap().data().iter().zip(&ws).zip(&gs) {
                prop_assert_eq!(*a, w0 - lr32 * g);
            }
        }

        #[test]
        fn grad_and_lr_rescaling_cancel(w0 in -5.0f32..5.0, g in -5.0f32..5.0, c in 0.1f32..10.0) {
            let mut a = single(w0, g);
            let mut b = single(w0, g * c);
            sgd_step(&mut a, &mut SgdState::new(0.05, 0.0, 0.0).unwrap()).unwrap();
            sgd_step(&mut b, &mut SgdState::new(0.05 / c as f64, 0.0, 0.0).unwrap()).unwrap();
            let tol = 1e-5 * (1.0 + w0.abs() + g.abs());
            prop_assert!((w(&a) - w(&b)).abs() <= tol);
        }

        #[test]
        fn schedule_formula(base in 1e-4f64..1.0, gamma in 0.01f64..1.0, step in 1usize..20, epoch in 0usize..100) {
            let s = StepSchedule { base_lr: base, gamma, step_epochs: step };
            let expect = base * gamma.powi((epoch / step) as i32);
            prop_assert!((s.lr_at(epoch) - expect).abs() <= 1e-15 * base.max(expect));
        }
    }
}
