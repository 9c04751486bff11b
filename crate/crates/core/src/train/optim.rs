//! Adam, Nesterov momentum, polynomial learning-rate decay and global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor<f32>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Nesterov { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn nesterov() -> Self {
        OptimizerKind::Nesterov { momentum: 0.9 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            OptimizerKind::Nesterov { momentum } => (0.0..1.0).contains(&momentum),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

/// Per-parameter slots (Adam: first and second moments; Nesterov:
/// velocity) and the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    slots: BTreeMap<String, Vec<Vec<f64>>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            slots: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Slot buffers of `name`, if it has been updated.
    pub fn slots(&self, name: &str) -> Option<&[Vec<f64>]> {
        self.slots.get(name).map(Vec::as_slice)
    }

    /// Start a new step; Adam's bias correction uses the new count.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter in place. Parameters are independent, so the
    /// order of calls within a step does not matter.
    pub fn update(&mut self, name: &str, param: &mut Tensor<f32>, grad: &Tensor<f32>, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer",
                expected: param.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        if self.step == 0 {
            return Err(Error::invalid("optimizer", "update before begin_step"));
        }
        let n = param.numel();
        let nslots = match self.kind {
            OptimizerKind::Adam { .. } => 2,
            OptimizerKind::Nesterov { .. } => 1,
        };
        let slots = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| vec![vec![0.0; n]; nslots]);
        if slots[0].len() != n {
            return Err(Error::ShapeMismatch {
                op: "optimizer slots",
                expected: vec![slots[0].len()],
                got: vec![n],
            });
        }
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (c1, c2) = (1.0 - beta1.powf(self.step as f64), 1.0 - beta2.powf(self.step as f64));
                let (m, rest) = slots.split_at_mut(1);
                let (m, v) = (&mut m[0], &mut rest[0]);
                for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    let g = g as f64;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let upd = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    *p = (*p as f64 - upd) as f32;
                }
            }
            OptimizerKind::Nesterov { momentum } => {
                let v = &mut slots[0];
                for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    let g = g as f64;
                    v[i] = momentum * v[i] - lr * g;
                    *p = (*p as f64 + momentum * v[i] - lr * g) as f32;
                }
            }
        }
        Ok(())
    }

    /// One full step over every parameter that has a gradient.
    pub fn apply(&mut self, params: &mut ParamStore<f32>, grads: &GradMap, lr: f64) -> Result<()> {
        self.begin_step();
        for (name, g) in grads {
            let p = params
                .param_mut(name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            self.update(name, p, g, lr)?;
        }
        Ok(())
    }
}

/// A single bias-corrected Adam step.
pub fn adam_step(params: &mut ParamStore<f32>, grads: &GradMap, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if !matches!(state.kind, OptimizerKind::Adam { .. }) {
        return Err(Error::invalid("adam_step", "optimizer state is not Adam"));
    }
    state.apply(params, grads, lr)
}

/// A single Nesterov momentum step.
pub fn nesterov_step(params: &mut ParamStore<f32>, grads: &GradMap, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if !matches!(state.kind, OptimizerKind::Nesterov { .. }) {
        return Err(Error::invalid("nesterov_step", "optimizer state is not Nesterov"));
    }
    state.apply(params, grads, lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub end_lr: f64,
    pub power: f64,
    pub total_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 0.01,
            end_lr: 1e-5,
            power: 2.0,
            total_steps: 1000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr < 0.0 || self.end_lr < 0.0 || !(self.power > 0.0) || self.total_steps == 0 {
            return Err(Error::Config(format!(
                "schedule needs base_lr, end_lr >= 0, power > 0 and total_steps > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// `(base − end)·(1 − step/total)^power + end`, clamped at `end` past the
/// last step.
pub fn poly_lr(step: usize, s: &LrSchedule) -> f64 {
    let frac = 1.0 - (step.min(s.total_steps) as f64 / s.total_steps as f64);
    (s.base_lr - s.end_lr) * frac.powf(s.power) + s.end_lr
}

/// Scale every gradient by `max_norm / N` when the global L2 norm `N`
/// exceeds `max_norm`. Returns `N`.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(
            "clip_global_norm",
            format!("max_norm {max_norm} must be positive"),
        ));
    }
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g = (*g as f64 * s) as f32);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: &[f64]) -> ParamStore<f32> {
        let mut s = ParamStore::new(0);
        s.insert_param(name, Tensor::from_f64([v.len()], v).unwrap());
        s
    }

    fn grads(name: &str, v: &[f64]) -> GradMap {
        [(name.to_string(), Tensor::from_f64([v.len()], v).unwrap())].into()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = single("w", &[0.5, -2.0, 3.0]);
        let mut st = OptimizerState::new(OptimizerKind::adam());
        adam_step(&mut p, &grads("w", &[1.0; 3]), &mut st, 1e-3).unwrap();
        for (a, b) in p.param("w").unwrap().data().iter().zip([0.5, -2.0, 3.0]) {
            assert!(((*a as f64 - b) + 1e-3).abs() < 1e-6);
        }
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimizerKind::adam(), OptimizerKind::nesterov()] {
            let mut p = single("w", &[0.5, -2.0]);
            let before = p.param("w").unwrap().clone();
            let mut st = OptimizerState::new(kind);
            st.apply(&mut p, &grads("w", &[0.0, 0.0]), 0.1).unwrap();
            assert_eq!(p.param("w").unwrap(), &before);
        }
    }

    #[test]
    fn nesterov_without_momentum_is_sgd() {
        let mut p = single("w", &[0.5, -2.0]);
        let mut st = OptimizerState::new(OptimizerKind::Nesterov { momentum: 0.0 });
        nesterov_step(&mut p, &grads("w", &[0.25, 4.0]), &mut st, 0.5).unwrap();
        assert_eq!(p.param("w").unwrap().data(), &[0.5 - 0.125, -4.0]);
    }

    #[test]
    fn wrong_kind_and_shape_are_errors() {
        let mut p = single("w", &[0.5, -2.0]);
        let mut st = OptimizerState::new(OptimizerKind::adam());
        assert!(nesterov_step(&mut p, &grads("w", &[1.0, 1.0]), &mut st, 0.1).is_err());
        assert!(adam_step(&mut p, &grads("w", &[1.0]), &mut st, 0.1).is_err());
        assert!(adam_step(&mut p, &grads("v", &[1.0]), &mut st, 0.1).is_err());
    }

    #[test]
    fn poly_lr_examples() {
        let s = LrSchedule {
            base_lr: 0.01,
            end_lr: 0.0,
            power: 1.0,
            total_steps: 100,
        };
        assert_eq!(poly_lr(0, &s), 0.01);
        assert_eq!(poly_lr(50, &s), 0.005);
        assert_eq!(poly_lr(100, &s), 0.0);
        assert_eq!(poly_lr(1000, &s), 0.0);
    }

    #[test]
    fn clipping_examples() {
        let mut g = grads("a", &[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 5.0).unwrap(), 5.0);
        assert_eq!(g["a"].data(), &[3.0, 4.0]);
        clip_global_norm(&mut g, 2.5).unwrap();
        assert_eq!(g["a"].data(), &[1.5, 2.0]);
        assert!(clip_global_norm(&mut g, 0.0).is_err());
    }
}
