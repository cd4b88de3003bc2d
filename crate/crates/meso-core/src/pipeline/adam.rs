//! Adam optimizer with first/second-moment bias correction.
//!
//! Moments are kept in f64 regardless of parameter precision so small
//! pose corrections survive accumulation.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("non-finite gradient in parameter group")]
pub struct NonFiniteGradient;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment state for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn update(&mut self, grads: &[f64], hyper: &AdamHyper, mut write: impl FnMut(usize, f64)) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - crate::math::powf(hyper.beta1, t as f64);
        let bc2 = 1.0 - crate::math::powf(hyper.beta2, t as f64);
        for (i, &g) in grads.iter().enumerate() {
            self.m[i] = hyper.beta1 * self.m[i] + (1.0 - hyper.beta1) * g;
            self.v[i] = hyper.beta2 * self.v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            write(i, hyper.lr * m_hat / (crate::math::sqrt(v_hat) + hyper.eps));
        }
    }
}

/// One Adam step over an f64 parameter slice. Rejects non-finite
/// gradients without touching the moments or parameters.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    hyper: &AdamHyper,
) -> Result<(), NonFiniteGradient> {
    debug_assert_eq!(params.len(), grads.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(NonFiniteGradient);
    }
    state.update(grads, hyper, |i, delta| params[i] -= delta);
    Ok(())
}

/// Same update for f32 parameter blobs (network weights).
pub fn adam_step_f32(
    state: &mut AdamState,
    params: &mut [f32],
    grads: &[f32],
    hyper: &AdamHyper,
) -> Result<(), NonFiniteGradient> {
    debug_assert_eq!(params.len(), grads.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(NonFiniteGradient);
    }
    let grads64: Vec<f64> = grads.iter().map(|&g| g as f64).collect();
    state.update(&grads64, hyper, |i, delta| {
        params[i] = (params[i] as f64 - delta) as f32
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut state = AdamState::new(3);
        let mut params = [1.0f64, -2.0, 0.5];
        let before = params;
        for _ in 0..10 {
            adam_step(&mut state, &mut params, &[0.0; 3], &AdamHyper::with_lr(0.1)).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn constant_gradient_step_magnitude_approaches_lr() {
        let hyper = AdamHyper::with_lr(0.01);
        let mut state = AdamState::new(1);
        let mut params = [0.0f64];
        let mut prev = params[0];
        let mut last_step = 0.0;
        for _ in 0..500 {
            adam_step(&mut state, &mut params, &[3.7], &hyper).unwrap();
            last_step = prev - params[0];
            prev = params[0];
        }
        assert!(
            (last_step - hyper.lr).abs() < 0.05 * hyper.lr,
            "asymptotic step {last_step} vs lr {}",
            hyper.lr
        );
    }

    #[test]
    fn converges_on_two_variable_quadratic() {
        // f(x, y) = (x - 3)^2 + 10 (y + 2)^2, minimum at (3, -2).
        let hyper = AdamHyper::with_lr(0.05);
        let mut state = AdamState::new(2);
        let mut p = [0.0f64, 0.0];
        for _ in 0..5000 {
            let g = [2.0 * (p[0] - 3.0), 20.0 * (p[1] + 2.0)];
            adam_step(&mut state, &mut p, &g, &hyper).unwrap();
        }
        assert!((p[0] - 3.0).abs() < 1e-6, "x = {}", p[0]);
        assert!((p[1] + 2.0).abs() < 1e-6, "y = {}", p[1]);
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let mut state = AdamState::new(2);
        let mut params = [1.0f64, 2.0];
        adam_step(&mut state, &mut params, &[0.1, 0.2], &AdamHyper::with_lr(0.01)).unwrap();
        let snapshot = (state.clone(), params);
        let out = adam_step(
            &mut state,
            &mut params,
            &[f64::NAN, 0.0],
            &AdamHyper::with_lr(0.01),
        );
        assert_eq!(out, Err(NonFiniteGradient));
        assert_eq!(state, snapshot.0);
        assert_eq!(params, snapshot.1);
    }
}
