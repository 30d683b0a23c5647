//! Base optimizers that consume a single combined gradient.

use serde::{Deserialize, Serialize};

use crate::dual_encoder::ParamVector;
use crate::error::{check_len, Error, Result};

/// Linear warmup from 0 to `peak` over the first `warmup_fraction * total`
/// steps, then linear decay to 0 at `total`.
pub fn lr_at(step: u64, total: u64, peak: f64, warmup_fraction: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("schedule needs total > 0".into()));
    }
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} past schedule end {total}")));
    }
    let (step, total) = (step as f64, total as f64);
    let warmup = warmup_fraction * total;
    Ok(if step < warmup {
        peak * step / warmup
    } else {
        peak * (total - step) / (total - warmup)
    })
}

/// Anything that turns a gradient into a parameter update.
pub trait BaseOptimizer {
    fn step(&mut self, params: &mut ParamVector, grad: &[f64]) -> Result<()>;

    /// Learning rate the next call to [`BaseOptimizer::step`] will use.
    fn learning_rate(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Past the end the rate stays at 0.
    fn at(&self, step: u64) -> f64 {
        lr_at(step.min(self.total_steps), self.total_steps, self.peak_lr, self.warmup_fraction)
            .unwrap_or(0.0)
    }
}

fn check_grad(params: &ParamVector, grad: &[f64]) -> Result<()> {
    check_len(params.len(), grad.len(), "gradient")?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(())
}

/// Plain gradient descent `θ ← θ − η_t g` on the shared schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub schedule: LrSchedule,
    pub step: u64,
}

impl Sgd {
    pub fn new(schedule: LrSchedule) -> Self {
        Self { schedule, step: 0 }
    }
}

impl BaseOptimizer for Sgd {
    fn step(&mut self, params: &mut ParamVector, grad: &[f64]) -> Result<()> {
        check_grad(params, grad)?;
        let lr = self.learning_rate();
        for (p, g) in params.as_mut_slice().iter_mut().zip(grad) {
            *p -= lr * g;
        }
        self.step += 1;
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.schedule.at(self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: LrSchedule,
}

impl AdamState {
    pub fn new(dim: usize, schedule: LrSchedule) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule,
        }
    }
}

/// Bias-corrected Adam with the scheduled learning rate.
pub fn adam_step(state: &mut AdamState, grad: &[f64], params: &mut ParamVector) -> Result<()> {
    check_grad(params, grad)?;
    check_len(state.m.len(), grad.len(), "adam moments")?;
    let lr = state.schedule.at(state.step);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in params
        .as_mut_slice()
        .iter_mut()
        .zip(grad)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + state.epsilon);
    }
    Ok(())
}

impl BaseOptimizer for AdamState {
    fn step(&mut self, params: &mut ParamVector, grad: &[f64]) -> Result<()> {
        adam_step(self, grad, params)
    }

    fn learning_rate(&self) -> f64 {
        self.schedule.at(self.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(lr: f64) -> LrSchedule {
        LrSchedule {
            peak_lr: lr,
            warmup_fraction: 0.0,
            total_steps: 1_000_000,
        }
    }

    #[test]
    fn schedule_landmarks() {
        assert_eq!(lr_at(10, 100, 2.0, 0.1).unwrap(), 2.0);
        assert_eq!(lr_at(100, 100, 2.0, 0.1).unwrap(), 0.0);
        assert_eq!(lr_at(5, 100, 2.0, 0.1).unwrap(), 1.0);
        assert_eq!(lr_at(0, 100, 2.0, 0.1).unwrap(), 0.0);
        assert!((lr_at(55, 100, 2.0, 0.1).unwrap() - 1.0).abs() < 1e-12);
        assert!(lr_at(0, 0, 1.0, 0.1).is_err());
        assert!(lr_at(101, 100, 1.0, 0.1).is_err());
    }

    #[test]
    fn adam_zero_gradient_from_fresh_state() {
        let mut s = AdamState::new(3, flat(0.1));
        let mut p = ParamVector(vec![1.0, -2.0, 3.0]);
        adam_step(&mut s, &[0.0; 3], &mut p).unwrap();
        assert_eq!(p.0, vec![1.0, -2.0, 3.0]);

        // Non-zero moments decay under a zero gradient.
        adam_step(&mut s, &[1.0, 1.0, 1.0], &mut p).unwrap();
        let m = s.m.clone();
        adam_step(&mut s, &[0.0; 3], &mut p).unwrap();
        assert!(s.m.iter().zip(&m).all(|(a, b)| (a - 0.9 * b).abs() < 1e-15));
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut s = AdamState::new(3, flat(0.01));
        let mut p = ParamVector(vec![0.0; 3]);
        adam_step(&mut s, &[3.0, -0.5, 1e-3], &mut p).unwrap();
        assert!((p.0[0] + 0.01).abs() < 1e-8);
        assert!((p.0[1] - 0.01).abs() < 1e-8);
        assert!((p.0[2] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut s = AdamState::new(1, flat(0.1));
        let mut p = ParamVector(vec![0.0]);
        assert!(adam_step(&mut s, &[f64::NAN], &mut p).is_err());
    }

    #[test]
    fn sgd_follows_schedule() {
        let mut s = Sgd::new(LrSchedule {
            peak_lr: 1.0,
            warmup_fraction: 0.5,
            total_steps: 4,
        });
        let mut p = ParamVector(vec![0.0]);
        let mut lrs = Vec::new();
        for _ in 0..4 {
            lrs.push(s.learning_rate());
            s.step(&mut p, &[1.0]).unwrap();
        }
        assert_eq!(lrs, vec![0.0, 0.5, 1.0, 0.5]);
        assert_eq!(p.0[0], -2.0);
    }
}
