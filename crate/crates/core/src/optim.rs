//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Optimizer state: step count and first/second moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One descent step on `params` along `grads`. Non-finite gradients abort
/// before anything is modified.
pub fn optimizer_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::domain(format!(
            "shape mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {} at step {}",
            grads[i],
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            optimizer_step(&mut s, &mut p, &[0.0; 3], 0.1).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn first_step_is_about_lr() {
        // m_hat = g, v_hat = g^2 -> delta = -lr * g / (|g| + eps).
        let mut s = AdamState::new(1);
        let mut p = vec![0.0];
        optimizer_step(&mut s, &mut p, &[1.0], 0.01).unwrap();
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        let mut s = AdamState::new(1);
        let mut p = vec![0.0];
        optimizer_step(&mut s, &mut p, &[-250.0], 0.01).unwrap();
        assert!((p[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut s = AdamState::new(2);
        let mut p = vec![1.0, 2.0];
        let err = optimizer_step(&mut s, &mut p, &[0.1, f64::NAN], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(2);
        assert!(optimizer_step(&mut s, &mut [0.0; 2], &[0.0; 3], 0.1).is_err());
    }

    #[test]
    fn identical_runs_identical_states() {
        let run = || {
            let mut s = AdamState::new(2);
            let mut p = vec![0.3, -0.7];
            for i in 0..10 {
                let g = [p[0] * 2.0 + i as f64 * 0.01, p[1].sin()];
                optimizer_step(&mut s, &mut p, &g, 0.05).unwrap();
            }
            (s, p)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = AdamState::new(2);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            optimizer_step(&mut s, &mut p, &g, 0.01).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }
}
