//! Trainable parameters: a value tensor, its gradient accumulator, a freeze
//! flag, and a stable identifier used to key optimizer state.

use crate::error::{DdpError, Result};
use crate::tensor::Tensor;

/// A named, optionally frozen, trainable tensor.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Parameter {
    identifier: String,
    value: Tensor,
    gradient: Tensor,
    /// Whether `gradient` has been populated since the last reset. The
    /// optimizer refuses to step a trainable parameter whose gradient was
    /// never written — a populated all-zero gradient is valid, an untouched
    /// one is a usage bug.
    grad_ready: bool,
    frozen: bool,
}

impl Parameter {
    /// New trainable parameter with a zeroed gradient.
    pub fn new(identifier: impl Into<String>, value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape().to_vec());
        Parameter {
            identifier: identifier.into(),
            value,
            gradient,
            grad_ready: false,
            frozen: false,
        }
    }

    /// New permanently frozen parameter (encoder weights).
    pub fn frozen(identifier: impl Into<String>, value: Tensor) -> Self {
        let mut p = Parameter::new(identifier, value);
        p.frozen = true;
        p
    }

    pub fn identifier(&self) -> &str {
        &self.identifier
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn gradient(&self) -> &Tensor {
        &self.gradient
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Whether the gradient has been populated since the last reset.
    pub fn grad_ready(&self) -> bool {
        self.grad_ready
    }

    /// Mark the parameter frozen; optimizer steps will skip it from now on.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Overwrite the value in place (optimizer update path).
    pub(crate) fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(DdpError::Shape(format!(
                "parameter {} value shape changed from {:?} to {:?}",
                self.identifier,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = value;
        Ok(())
    }

    /// Add `g` into the gradient accumulator and mark it populated.
    pub fn accumulate_gradient(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.gradient.shape() {
            return Err(DdpError::Shape(format!(
                "parameter {} gradient shape {:?} does not match value shape {:?}",
                self.identifier,
                g.shape(),
                self.gradient.shape()
            )));
        }
        for (acc, x) in self.gradient.values_mut().iter_mut().zip(g.values()) {
            *acc += x;
        }
        self.gradient.check_finite("accumulate_gradient")?;
        self.grad_ready = true;
        Ok(())
    }

    /// Zero the gradient and clear the populated flag.
    pub fn reset_gradient(&mut self) {
        self.gradient = Tensor::zeros(self.value.shape().to_vec());
        self.grad_ready = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_value_shape() {
        let p = Parameter::new("p", Tensor::zeros(vec![2, 3]));
        assert_eq!(p.gradient().shape(), &[2, 3]);
        assert!(!p.grad_ready());
        assert!(!p.is_frozen());
    }

    #[test]
    fn accumulate_sums_and_marks_ready() {
        let mut p = Parameter::new("p", Tensor::zeros(vec![2]));
        let g = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        p.accumulate_gradient(&g).unwrap();
        p.accumulate_gradient(&g).unwrap();
        assert_eq!(p.gradient().values(), &[2.0, 4.0]);
        assert!(p.grad_ready());
        p.reset_gradient();
        assert_eq!(p.gradient().values(), &[0.0, 0.0]);
        assert!(!p.grad_ready());
    }

    #[test]
    fn accumulate_rejects_shape_mismatch() {
        let mut p = Parameter::new("p", Tensor::zeros(vec![2]));
        let g = Tensor::zeros(vec![3]);
        assert!(p.accumulate_gradient(&g).is_err());
    }

    #[test]
    fn frozen_constructor_sets_flag() {
        let p = Parameter::frozen("w", Tensor::zeros(vec![1]));
        assert!(p.is_frozen());
    }
}
