//! Optimizers and the learning-rate schedule.

use crate::model::{OptimizerSnapshot, ParamSet, TensorData};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum { momentum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Learning rate at `step` of `total_steps` with linear warmup.
pub fn learning_rate(
    base_lr: f64,
    schedule: ScheduleKind,
    warmup_steps: usize,
    step: usize,
    total_steps: usize,
) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    match schedule {
        ScheduleKind::Constant => base_lr,
        ScheduleKind::Cosine => {
            let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
            let t = (step.saturating_sub(warmup_steps) as f64 / span).min(1.0);
            base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Adam (or SGD-with-momentum) over a parameter set, with per-parameter
/// learning-rate multipliers. A multiplier of zero skips the parameter
/// entirely, leaving its bits untouched.
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    pub step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .iter()
            .map(|(_, v)| ArrayD::zeros(v.raw_dim()))
            .collect();
        Self {
            kind,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn apply(
        &mut self,
        params: &mut ParamSet,
        grads: &[ArrayD<f64>],
        lr: f64,
        multipliers: &[f64],
    ) {
        assert_eq!(grads.len(), params.len());
        assert_eq!(multipliers.len(), params.len());
        self.step += 1;
        let t = self.step as f64;
        for (i, r) in params.refs().enumerate().collect::<Vec<_>>() {
            let mult = multipliers[i];
            if mult == 0.0 {
                continue;
            }
            let g = &grads[i];
            let lr_i = lr * mult;
            match self.kind {
                OptimizerKind::Adam => {
                    self.m[i] = &self.m[i] * self.beta1 + &(g * (1.0 - self.beta1));
                    self.v[i] = &self.v[i] * self.beta2 + &(g.mapv(|x| x * x) * (1.0 - self.beta2));
                    let m_hat = &self.m[i] / (1.0 - self.beta1.powf(t));
                    let v_hat = &self.v[i] / (1.0 - self.beta2.powf(t));
                    let update = m_hat / (v_hat.mapv(f64::sqrt) + self.eps);
                    *params.value_mut(r) -= &(update * lr_i);
                }
                OptimizerKind::SgdMomentum { momentum } => {
                    self.m[i] = &self.m[i] * momentum + g;
                    let update = self.m[i].clone();
                    *params.value_mut(r) -= &(update * lr_i);
                }
            }
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.step,
            m: self.m.iter().map(TensorData::from).collect(),
            v: self.v.iter().map(TensorData::from).collect(),
        }
    }

    pub fn restore(
        kind: OptimizerKind,
        params: &ParamSet,
        snapshot: &OptimizerSnapshot,
    ) -> Result<Self, crate::model::ModelError> {
        let mut opt = Self::new(kind, params);
        if snapshot.m.len() != opt.m.len() || snapshot.v.len() != opt.v.len() {
            return Err(crate::model::ModelError::Checkpoint(
                "optimizer state length mismatch".into(),
            ));
        }
        opt.step = snapshot.step;
        opt.m = snapshot
            .m
            .iter()
            .map(|t| t.to_array())
            .collect::<Result<_, _>>()?;
        opt.v = snapshot
            .v
            .iter()
            .map(|t| t.to_array())
            .collect::<Result<_, _>>()?;
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn one_param(value: f64) -> ParamSet {
        let mut p = ParamSet::default();
        p.register("w", ArrayD::from_elem(IxDyn(&[2]), value));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameter_bits_unchanged() {
        let mut params = one_param(0.73);
        let before = params.value(params.refs().next().unwrap()).clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &params);
        let grads = vec![ArrayD::zeros(IxDyn(&[2]))];
        opt.apply(&mut params, &grads, 1e-3, &[1.0]);
        let after = params.value(params.refs().next().unwrap()).clone();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_multiplier_freezes_the_parameter() {
        let mut params = one_param(0.5);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &params);
        let grads = vec![ArrayD::from_elem(IxDyn(&[2]), 3.0)];
        opt.apply(&mut params, &grads, 1e-2, &[0.0]);
        assert_eq!(params.value(params.refs().next().unwrap())[[0]], 0.5);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut params = one_param(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &params);
        let grads = vec![ArrayD::from_elem(IxDyn(&[2]), 2.0)];
        opt.apply(&mut params, &grads, 1e-2, &[1.0]);
        assert!(params.value(params.refs().next().unwrap())[[0]] < 1.0);
    }

    #[test]
    fn warmup_then_cosine_decays_to_zero() {
        let lr0 = learning_rate(1.0, ScheduleKind::Cosine, 10, 0, 100);
        let lr_warm = learning_rate(1.0, ScheduleKind::Cosine, 10, 9, 100);
        let lr_mid = learning_rate(1.0, ScheduleKind::Cosine, 10, 55, 100);
        let lr_end = learning_rate(1.0, ScheduleKind::Cosine, 10, 100, 100);
        assert!((lr0 - 0.1).abs() < 1e-12);
        assert!((lr_warm - 1.0).abs() < 1e-12);
        assert!(lr_mid < 1.0 && lr_mid > 0.0);
        assert!(lr_end.abs() < 1e-12);
    }

    #[test]
    fn snapshot_restore_round_trips() {
        let mut params = one_param(0.2);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &params);
        let grads = vec![ArrayD::from_elem(IxDyn(&[2]), 0.7)];
        opt.apply(&mut params, &grads, 1e-2, &[1.0]);
        let snap = opt.snapshot();
        let restored = Optimizer::restore(OptimizerKind::Adam, &params, &snap).unwrap();
        assert_eq!(restored.step, opt.step);
        assert_eq!(restored.m, opt.m);
        assert_eq!(restored.v, opt.v);
    }
}
