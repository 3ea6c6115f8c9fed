//! AdamW with decoupled weight decay and a warmup schedule.

use serde::Serialize;

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Schedule {
    /// Linear warmup, then linear decay towards zero at the final step.
    Linear,
    /// Linear warmup, then constant.
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Schedule::Linear),
            "constant" => Ok(Schedule::Constant),
            other => Err(format!("unknown schedule {other:?}; expected linear or constant")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub schedule: Schedule,
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(format!("betas must lie in (0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.eps <= 0.0 {
            return Err(format!("eps must be positive, got {}", self.eps));
        }
        if self.lr <= 0.0 {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        if self.weight_decay < 0.0 {
            return Err(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        Ok(())
    }

    /// Learning rate for the 1-based update `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.max(1);
        if step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Linear => {
                let decay = self.total_steps.saturating_sub(self.warmup_steps);
                if decay == 0 {
                    return self.lr;
                }
                let left = (self.total_steps + 1).saturating_sub(step);
                self.lr * left as f64 / decay as f64
            }
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Vec<T>> = params.into_iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self { v: m.clone(), m }
    }
}

/// One AdamW update at 1-based `step`:
///
/// ```text
/// m ← β1·m + (1−β1)·g          v ← β2·v + (1−β2)·g²
/// p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)   with m̂ = m/(1−β1^t), v̂ = v/(1−β2^t)
/// ```
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &AdamWConfig,
    step: usize,
) -> Result<(), TensorError> {
    if step == 0 {
        return Err(TensorError::Contract("adamw_step: step is 1-based".into()));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TensorError::Contract(format!(
            "adamw_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        if grads[i].len() != n || state.m[i].len() != n || state.v[i].len() != n {
            return Err(TensorError::Dimension {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: vec![grads[i].len()],
            });
        }
    }
    let lr = T::from_f64(cfg.lr_at(step));
    let decay = T::from_f64(cfg.lr_at(step) * cfg.weight_decay);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(step as i32));
    let eps = T::from_f64(cfg.eps);
    let one = T::one();
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w = *w - decay * *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            total_steps: 10,
            schedule: Schedule::Constant,
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = Tensor::<f64>::from_rows(&[&[1.0, -2.0, 3.5]]);
        let before = p.clone();
        let mut st = AdamState::zeros_like([&p]);
        for step in 1..=5 {
            adamw_step(&mut [&mut p], &[vec![0.0; 3]], &mut st, &cfg(0.1, 0.0), step).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::from_rows(&[&[0.0]]);
        let mut st = AdamState::zeros_like([&p]);
        adamw_step(&mut [&mut p], &[vec![1.0]], &mut st, &cfg(0.1, 0.0), 1).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        assert!((p.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn pure_decay_scales_params() {
        let mut p = Tensor::<f64>::from_rows(&[&[2.0, -4.0]]);
        let mut st = AdamState::zeros_like([&p]);
        adamw_step(&mut [&mut p], &[vec![0.0; 2]], &mut st, &cfg(0.1, 0.01), 1).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        assert!((p.data()[1] + 4.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::<f64>::zeros(vec![2, 2]);
        let mut st = AdamState::zeros_like([&p]);
        assert!(adamw_step(&mut [&mut p], &[vec![0.0; 3]], &mut st, &cfg(0.1, 0.0), 1).is_err());
        assert!(adamw_step(&mut [&mut p], &[vec![0.0; 4]], &mut st, &cfg(0.1, 0.0), 0).is_err());
    }

    #[test]
    fn linear_schedule_shape() {
        let c = AdamWConfig {
            warmup_steps: 4,
            total_steps: 12,
            schedule: Schedule::Linear,
            ..cfg(1.0, 0.0)
        };
        assert_eq!(c.lr_at(1), 0.25);
        assert_eq!(c.lr_at(4), 1.0);
        assert_eq!(c.lr_at(5), 1.0);
        assert_eq!(c.lr_at(12), 1.0 / 8.0);
        let lrs: Vec<f64> = (5..=12).map(|s| c.lr_at(s)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }
}
