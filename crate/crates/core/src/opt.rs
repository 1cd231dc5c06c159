//! Adam updates and the step learning-rate schedule shared by pretraining
//! and fine-tuning.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Parameter, Real};

/// Base rate multiplied by `decay` at every milestone epoch. Epochs are
/// 1-based; the milestone epoch itself already uses the decayed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub base_lr: Real,
    pub milestones: Vec<usize>,
    pub decay: Real,
}

impl StepSchedule {
    pub fn new(base_lr: Real, milestones: Vec<usize>, decay: Real) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "StepSchedule::new",
                msg: format!("learning rate must be positive and finite, got {base_lr}"),
            });
        }
        if !(decay > 0.0 && decay.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "StepSchedule::new",
                msg: format!("decay must be positive and finite, got {decay}"),
            });
        }
        if milestones.first().is_some_and(|&m| m == 0)
            || milestones.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidArgument {
                op: "StepSchedule::new",
                msg: format!("milestones must be strictly increasing and >= 1, got {milestones:?}"),
            });
        }
        Ok(StepSchedule {
            base_lr,
            milestones,
            decay,
        })
    }

    /// All milestones must fall inside the training horizon.
    pub fn check_horizon(&self, epochs: usize) -> Result<()> {
        if let Some(&m) = self.milestones.iter().find(|&&m| m > epochs) {
            return Err(Error::InvalidArgument {
                op: "StepSchedule::check_horizon",
                msg: format!("milestone {m} beyond final epoch {epochs}"),
            });
        }
        Ok(())
    }

    /// Effective rate at a 1-based epoch, computed by repeated
    /// multiplication so logged values are exactly reproducible.
    pub fn lr_at(&self, epoch: usize) -> Real {
        self.milestones
            .iter()
            .filter(|&&m| m <= epoch)
            .fold(self.base_lr, |lr, _| lr * self.decay)
    }
}

/// Adam with bias correction. Moment buffers are positional: `step` must
/// receive the same parameters in the same order every call.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    t: u32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[&Parameter]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
            v: params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    /// Apply one update from the gradients currently stored in the
    /// parameters.
    pub fn step(&mut self, params: &mut [&mut Parameter], lr: Real) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "optimizer was built for {} parameters, got {}",
            self.m.len(),
            params.len()
        );
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            assert_eq!(
                p.value.shape(),
                self.m[i].shape(),
                "parameter {} changed shape between steps",
                p.name
            );
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
