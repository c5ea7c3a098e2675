//! SGD with classical momentum; weight decay is folded into the gradient,
//! the usual convention.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// A named trainable tensor plus its momentum buffer. Frozen state such as
/// the EMA teacher is kept as plain [`Tensor`]s and therefore can never be
/// handed to the optimizer.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub value: Tensor,
    momentum: Vec<f32>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.numel();
        ParamGroup {
            name: name.into(),
            value,
            momentum: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Sgd { momentum, weight_decay }
    }

    /// One update over every listed parameter:
    /// `v <- mu v + (g + wd w)`, `w <- w - lr v`, gradient consumed.
    ///
    /// Each parameter must carry a populated gradient (put there from the
    /// tape after backward); a missing one is an error naming the parameter.
    pub fn step<'a>(
        &self,
        params: impl IntoIterator<Item = &'a mut ParamGroup>,
        lr: f32,
    ) -> Result<()> {
        for p in params {
            let grad = p
                .value
                .grad
                .take()
                .ok_or_else(|| CoreError::MissingGrad(p.name.clone()))?;
            if grad.len() != p.value.numel() {
                return Err(CoreError::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: vec![grad.len()],
                });
            }
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let d = grad[i] + self.weight_decay * w[i];
                p.momentum[i] = self.momentum * p.momentum[i] + d;
                w[i] -= lr * p.momentum[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(value: Vec<f32>, grad: Vec<f32>) -> ParamGroup {
        let n = value.len();
        let mut t = Tensor::from_vec(vec![n], value).unwrap();
        t.grad = Some(grad);
        ParamGroup::new("w", t)
    }

    #[test]
    fn plain_sgd_without_momentum_or_decay() {
        let sgd = Sgd::new(0.0, 0.0);
        let mut p = with_grad(vec![1.0], vec![1.0]);
        sgd.step([&mut p], 0.1).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-7);
        assert!(p.value.grad.is_none(), "gradient must be consumed");
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        let sgd = Sgd::new(0.9, 0.0);
        let mut p = with_grad(vec![0.0], vec![1.0]);
        sgd.step([&mut p], 0.1).unwrap();
        p.value.grad = Some(vec![1.0]);
        sgd.step([&mut p], 0.1).unwrap();
        // v1 = 1, v2 = 0.9 + 1 = 1.9; theta = -(0.1 + 0.19) = -0.29
        assert!((p.value.data()[0] + 0.29).abs() < 1e-6);
    }

    #[test]
    fn decay_only_step_shrinks_exactly() {
        let sgd = Sgd::new(0.0, 1e-4);
        let mut p = with_grad(vec![1.0], vec![0.0]);
        sgd.step([&mut p], 0.008).unwrap();
        assert_eq!(p.value.data()[0], 1.0 - 0.008 * 1e-4);
    }

    #[test]
    fn missing_grad_names_the_parameter() {
        let sgd = Sgd::new(0.9, 0.0);
        let mut p = ParamGroup::new("backbone.layer00.wq", Tensor::zeros(vec![2]));
        let err = sgd.step([&mut p], 0.1).unwrap_err().to_string();
        assert!(err.contains("backbone.layer00.wq"), "{err}");
    }
}
