use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerMode {
    Sgd,
    /// Bias-corrected adaptive moments (Adam).
    Adaptive,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    mode: OptimizerMode,
    lr: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// A zero learning rate is accepted here so that no-op training runs can be
    /// configured; [`optimizer_step`] rejects it.
    pub fn new(mode: OptimizerMode, lr: f64) -> Self {
        Self {
            mode,
            lr,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerMode::Sgd, lr)
    }

    pub fn adaptive(lr: f64) -> Self {
        Self::new(OptimizerMode::Adaptive, lr)
    }

    pub fn mode(&self) -> OptimizerMode {
        self.mode
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// Applies one update to `params` from their gradient slots, then zeroes the
/// slots.
pub fn optimizer_step(params: &mut [&mut Tensor], state: &mut OptimizerState) -> Result<()> {
    if !(state.lr > 0.0) || !state.lr.is_finite() {
        return Err(Error::InvalidLearningRate(state.lr));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::MissingGrad(i));
        }
    }
    if state.mode == OptimizerMode::Adaptive {
        if state.first_moment.is_empty() {
            state.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            state.second_moment = state.first_moment.clone();
        }
        let conforming = state.first_moment.len() == params.len()
            && state.first_moment.iter().zip(params.iter()).all(|(m, p)| m.len() == p.len());
        if !conforming {
            return Err(Error::InvalidArgument(
                "optimizer moment buffers do not match parameters".into(),
            ));
        }
    }
    state.step += 1;
    let lr = state.lr;
    let t = state.step as i32;
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad().expect("checked above").to_vec();
        let mut values = p.data().to_vec();
        match state.mode {
            OptimizerMode::Sgd => {
                for (v, g) in values.iter_mut().zip(&grad) {
                    *v -= lr * g;
                }
            }
            OptimizerMode::Adaptive => {
                let m = &mut state.first_moment[i];
                let s = &mut state.second_moment[i];
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for j in 0..values.len() {
                    let g = grad[j];
                    m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                    s[j] = BETA2 * s[j] + (1.0 - BETA2) * g * g;
                    let m_hat = m[j] / c1;
                    let s_hat = s[j] / c2;
                    values[j] -= lr * m_hat / (s_hat.sqrt() + EPSILON);
                }
            }
        }
        p.assign(&values)?;
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::new(vec![1], vec![v]).unwrap().requiring_grad();
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    #[test]
    fn sgd_step() {
        let mut p = param(1.0, 0.5);
        let mut st = OptimizerState::sgd(0.1);
        optimizer_step(&mut [&mut p], &mut st).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p.grad(), Some(&[0.0][..]));
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        for mode in [OptimizerMode::Sgd, OptimizerMode::Adaptive] {
            let mut p = param(3.25, 0.0);
            let mut st = OptimizerState::new(mode, 0.01);
            for _ in 0..3 {
                p.accumulate_grad(&[0.0]).unwrap();
                optimizer_step(&mut [&mut p], &mut st).unwrap();
            }
            assert_eq!(p.data()[0], 3.25);
        }
    }

    #[test]
    fn adaptive_first_step_magnitude() {
        // t = 1: m_hat = g, s_hat = g^2, so the update is lr * g / (|g| + eps).
        for g in [1e-3, 0.7, -4.0, 250.0] {
            let lr = 2e-3;
            let mut p = param(0.0, g);
            let mut st = OptimizerState::adaptive(lr);
            optimizer_step(&mut [&mut p], &mut st).unwrap();
            let expected = -lr * g / (f64::abs(g) + EPSILON);
            assert!((p.data()[0] - expected).abs() < 1e-12);
            assert!((p.data()[0].abs() - lr).abs() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut st = OptimizerState::sgd(0.1);
        assert!(matches!(
            optimizer_step(&mut [&mut p], &mut st),
            Err(Error::MissingGrad(0))
        ));
        let mut q = param(0.0, 1.0);
        for lr in [0.0, -1.0] {
            let mut st = OptimizerState::sgd(lr);
            assert!(matches!(
                optimizer_step(&mut [&mut q], &mut st),
                Err(Error::InvalidLearningRate(_))
            ));
        }
    }
}
