//! SGD with momentum, per-group learning rates and a multi-step schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiStepSchedule {
    pub milestones: Vec<u64>,
    pub gamma: f64,
    pub total_steps: u64,
}

impl MultiStepSchedule {
    pub fn new(milestones: Vec<u64>, gamma: f64, total_steps: u64) -> Result<Self> {
        let s = Self { milestones, gamma, total_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = self.milestones.windows(2).all(|w| w[0] < w[1]);
        let below_total = self.milestones.iter().all(|&m| m < self.total_steps);
        if !increasing || !below_total {
            return Err(Error::ParamOutOfRange {
                name: "milestones",
                value: format!("{:?} (total {})", self.milestones, self.total_steps),
                range: "strictly increasing and below total_steps",
            });
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::ParamOutOfRange {
                name: "lr_decay",
                value: self.gamma.to_string(),
                range: "(0, 1]",
            });
        }
        Ok(())
    }

    /// Multiplier applied to a base learning rate at `step`.
    pub fn factor(&self, step: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.gamma.powi(passed as i32)
    }

    /// Milestones and total scaled by `fraction` (rounded up, at least 1).
    pub fn scaled(&self, fraction: f64) -> Self {
        let scale = |v: u64| ((v as f64 * fraction).ceil() as u64).max(1);
        let total_steps = scale(self.total_steps);
        let mut milestones: Vec<u64> = self.milestones.iter().map(|&m| scale(m)).filter(|&m| m < total_steps).collect();
        milestones.dedup();
        Self {
            milestones,
            gamma: self.gamma,
            total_steps,
        }
    }
}

/// `lr(step) = base_lr * gamma^(milestones passed)`.
pub fn lr_schedule(step: u64, base_lr: f64, schedule: &MultiStepSchedule) -> f64 {
    base_lr * schedule.factor(step)
}

/// Momentum SGD in the heavy-ball form `v = mu v + (g + wd w); w -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub base_lr: BTreeMap<ParamGroup, f64>,
    pub default_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: MultiStepSchedule,
}

impl Sgd {
    pub fn new(default_lr: f64, momentum: f64, weight_decay: f64, schedule: MultiStepSchedule) -> Self {
        Self {
            base_lr: BTreeMap::new(),
            default_lr,
            momentum,
            weight_decay,
            schedule,
        }
    }

    pub fn with_group_lr(mut self, group: ParamGroup, lr: f64) -> Self {
        self.base_lr.insert(group, lr);
        self
    }

    pub fn group_lr(&self, group: ParamGroup, step: u64) -> f64 {
        lr_schedule(step, *self.base_lr.get(&group).unwrap_or(&self.default_lr), &self.schedule)
    }

    /// Applies one update at schedule position `step` and clears gradients.
    pub fn step<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>, step: u64) {
        let mu = self.momentum as f32;
        let wd = self.weight_decay as f32;
        for p in params {
            if p.trainable {
                let lr = self.group_lr(p.group, step) as f32;
                let Param { value, grad, velocity, .. } = p;
                ndarray::Zip::from(value).and(grad.view()).and(velocity).for_each(|w, &g, v| {
                    *v = mu * *v + g + wd * *w;
                    *w -= lr * *v;
                });
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD};

    #[test]
    fn pretraining_schedule_values() {
        let s = MultiStepSchedule::new(vec![80_000, 120_000], 0.1, 150_000).unwrap();
        assert_eq!(lr_schedule(0, 0.1, &s), 0.1);
        assert!((lr_schedule(79_999, 0.1, &s) - 0.1).abs() < 1e-15);
        assert!((lr_schedule(80_000, 0.1, &s) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(149_999, 0.1, &s) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules() {
        assert!(MultiStepSchedule::new(vec![5, 5], 0.1, 10).is_err());
        assert!(MultiStepSchedule::new(vec![5, 12], 0.1, 10).is_err());
        assert!(MultiStepSchedule::new(vec![5], 0.0, 10).is_err());
    }

    #[test]
    fn scaling_is_proportional() {
        let s = MultiStepSchedule::new(vec![10_000], 0.1, 12_000).unwrap();
        let h = s.scaled(0.1);
        assert_eq!((h.milestones.clone(), h.total_steps), (vec![1_000], 1_200));
    }

    #[test]
    fn momentum_update_matches_hand_iteration() {
        let s = MultiStepSchedule::new(vec![1], 0.1, 3).unwrap();
        let opt = Sgd::new(0.5, 0.9, 0.0, s).with_group_lr(ParamGroup::Head, 1.0);
        let mut p = Param::new("w", ParamGroup::Head, arr1(&[1.0f32]).into_dyn());
        let mut frozen = Param::new("f", ParamGroup::Backbone, arr1(&[1.0f32]).into_dyn());
        frozen.trainable = false;
        p.grad = ArrayD::from_elem(p.value.raw_dim(), 2.0);
        frozen.grad = p.grad.clone();
        opt.step([&mut p, &mut frozen], 0);
        // v = 2, w = 1 - 1*2 = -1
        assert_eq!(p.value[[0]], -1.0);
        assert_eq!(p.grad[[0]], 0.0);
        p.grad.fill(1.0);
        opt.step([&mut p], 1);
        // v = 0.9*2 + 1 = 2.8, lr = 0.1 after the milestone
        assert!((p.value[[0]] - (-1.0 - 0.28)).abs() < 1e-6);
        assert_eq!(frozen.value[[0]], 1.0);
        assert_eq!(opt.group_lr(ParamGroup::Backbone, 0), 0.5);
    }
}
