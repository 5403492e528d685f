//! Adam optimizer with bias correction and a frozen-parameter skip contract.

use std::collections::BTreeMap;

use crate::error::{DdpError, Result};
use crate::param::Parameter;
use crate::tensor::Tensor;

/// Optimizer state: step count plus per-parameter moment estimates keyed by
/// the parameter identifier, so parameters can move between call sites
/// without losing their history.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Fresh state with the conventional β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }
}

/// One bias-corrected Adam update over `params`.
///
/// Frozen parameters are skipped entirely — their values and gradients are
/// bitwise untouched. Every non-frozen parameter must have a populated
/// gradient (an all-zero but populated gradient is fine); afterwards the
/// gradients of all updated parameters are reset to zero.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Parameter]) -> Result<()> {
    for p in params.iter() {
        if !p.is_frozen() && !p.grad_ready() {
            return Err(DdpError::Usage(format!(
                "adam_step on parameter {} with uninitialized gradient",
                p.identifier()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    for p in params.iter_mut() {
        if p.is_frozen() {
            continue;
        }
        let key = p.identifier().to_string();
        let shape = p.value().shape().to_vec();
        let m = state
            .first_moment
            .entry(key.clone())
            .or_insert_with(|| Tensor::zeros(shape.clone()));
        if m.shape() != shape.as_slice() {
            return Err(DdpError::Shape(format!(
                "adam moment shape {:?} does not match parameter {} shape {:?}",
                m.shape(),
                key,
                shape
            )));
        }
        let v = state
            .second_moment
            .entry(key)
            .or_insert_with(|| Tensor::zeros(shape.clone()));
        let mut new_vals = p.value().values().to_vec();
        for (((x, g), mi), vi) in new_vals
            .iter_mut()
            .zip(p.gradient().values())
            .zip(m.values_mut())
            .zip(v.values_mut())
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * g;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *x -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        p.set_value(Tensor::new(shape, new_vals)?)?;
        p.reset_gradient();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_with_grad(id: &str, value: Vec<f64>, grad: Vec<f64>) -> Parameter {
        let n = value.len();
        let mut p = Parameter::new(id, Tensor::new(vec![n], value).unwrap());
        p.accumulate_gradient(&Tensor::new(vec![n], grad).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_values_unchanged() {
        let mut state = AdamState::new(0.001);
        let mut p = param_with_grad("p", vec![1.5, -2.0], vec![0.0, 0.0]);
        adam_step(&mut state, &mut [&mut p]).unwrap();
        assert_eq!(p.value().values(), &[1.5, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn frozen_parameter_is_bitwise_unchanged() {
        let mut state = AdamState::new(0.01);
        let mut p = param_with_grad("p", vec![0.25, -0.75], vec![1.0, -3.0]);
        p.freeze();
        let before: Vec<u64> = p.value().values().iter().map(|x| x.to_bits()).collect();
        adam_step(&mut state, &mut [&mut p]).unwrap();
        let after: Vec<u64> = p.value().values().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
        // The gradient is also left alone on frozen parameters.
        assert_eq!(p.gradient().values(), &[1.0, -3.0]);
    }

    #[test]
    fn first_step_is_signed_unit_step() {
        // With bias correction, step one moves by −lr·g/(|g| + ε).
        let lr = 0.001;
        let g = 0.5;
        let mut state = AdamState::new(lr);
        let mut p = param_with_grad("p", vec![2.0], vec![g]);
        adam_step(&mut state, &mut [&mut p]).unwrap();
        let expect = 2.0 - lr * g / (g.abs() + 1e-8);
        assert!((p.value().values()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn uninitialized_gradient_is_a_usage_error() {
        let mut state = AdamState::new(0.001);
        let mut p = Parameter::new("p", Tensor::zeros(vec![2]));
        let err = adam_step(&mut state, &mut [&mut p]).unwrap_err();
        assert!(matches!(err, DdpError::Usage(_)));
    }

    #[test]
    fn gradients_are_reset_after_the_step() {
        let mut state = AdamState::new(0.001);
        let mut p = param_with_grad("p", vec![1.0], vec![0.7]);
        adam_step(&mut state, &mut [&mut p]).unwrap();
        assert!(!p.grad_ready());
        assert_eq!(p.gradient().values(), &[0.0]);
    }

    #[test]
    fn moments_persist_across_steps() {
        // Two steps with the same gradient move farther than one but less
        // than twice the first step would with fresh state (EMA smoothing).
        let mut state = AdamState::new(0.001);
        let mut p = param_with_grad("p", vec![0.0], vec![1.0]);
        adam_step(&mut state, &mut [&mut p]).unwrap();
        let after_one = p.value().values()[0];
        p.accumulate_gradient(&Tensor::new(vec![1], vec![1.0]).unwrap())
            .unwrap();
        adam_step(&mut state, &mut [&mut p]).unwrap();
        let after_two = p.value().values()[0];
        assert!(after_two < after_one);
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn defaults_are_conventional() {
        let s = AdamState::new(0.001);
        assert_eq!(s.beta1(), 0.9);
        assert_eq!(s.beta2(), 0.999);
    }
}
