//! Adam / AdamW with per-parameter state and the learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::tensor::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup followed by cosine decay to zero.
    CosineWarmup,
}

/// Learning rate for optimizer step `step` (0-based) out of `total` steps.
pub fn learning_rate(schedule: LrSchedule, base: f64, warmup_fraction: f64, step: u64, total: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::CosineWarmup => {
            let total = total.max(1);
            let warmup = ((warmup_fraction * total as f64).ceil() as u64).min(total);
            if step < warmup {
                return base * (step + 1) as f64 / warmup as f64;
            }
            let span = (total - warmup).max(1) as f64;
            let progress = ((step - warmup) as f64 / span).min(1.0);
            base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Updates applied to this parameter; drives bias correction.
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Keyed by parameter name so state survives checkpointing.
    pub state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) {
        for (&id, g) in grads {
            let name = params.name(id).to_string();
            let n = g.numel();
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                steps: 0,
            });
            st.steps += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(st.steps as i32);
            let c2 = 1.0 - b2.powi(st.steps as i32);
            let decay = match self.kind {
                OptimizerKind::Adam => 0.0,
                OptimizerKind::Adamw => lr * self.weight_decay,
            };
            let p = params.value_mut(id);
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                let gi = gi as f64;
                let mi = b1 * *m as f64 + (1.0 - b1) * gi;
                let vi = b2 * *v as f64 + (1.0 - b2) * gi * gi;
                *m = mi as f32;
                *v = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *w = (*w as f64 - decay * *w as f64 - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_warmup_shape() {
        let lr = |s| learning_rate(LrSchedule::CosineWarmup, 1.0, 0.05, s, 100);
        assert!((lr(0) - 0.2).abs() < 1e-12);
        assert!((lr(4) - 1.0).abs() < 1e-12);
        assert!(lr(50) < 1.0 && lr(50) > lr(90));
        assert!(lr(99) < 1e-3);
        assert_eq!(learning_rate(LrSchedule::Constant, 0.3, 0.05, 7, 10), 0.3);
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut grads = Gradients::new();
        grads.insert(id, Tensor::from_vec(&[2], vec![0.5, -3.0]));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0);
        opt.step(&mut store, &grads, 0.1);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![0.25, 4.0]));
        let mut grads = Gradients::new();
        grads.insert(id, Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let mut opt = Optimizer::new(OptimizerKind::Adamw, 0.01);
        opt.step(&mut store, &grads, 0.0);
        assert_eq!(store.value(id).data(), &[0.25, 4.0]);
    }
}
