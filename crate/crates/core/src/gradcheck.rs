//! Finite-difference verification of the tape's backward pass.
//!
//! The function under test is expressed once, generically over the scalar
//! type, via [`ScalarFn`]. Both sides of the comparison run in `f64`: the
//! analytic gradient from the tape's backward pass (the identical generic
//! code that training executes in `f32`) and the numeric gradient from
//! central differences. Checking at double precision keeps the comparison
//! about the correctness of the gradient rules instead of about
//! single-precision rounding; a separate consistency test guards the `f32`
//! instantiation.

use crate::autodiff::{Tape, Value};
use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tensor::TensorBase;

/// A scalar-valued function of a flat coordinate vector, buildable on a tape
/// of either precision.
pub trait ScalarFn {
    fn build<T: Real>(&self, tape: &mut Tape<T>, x: Value) -> Result<Value>;
}

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Per-coordinate relative error, `|a - n| / max(|a|, |n|, floor)`.
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor so coordinates with near-zero gradient on both
    /// sides are judged on absolute error at this scale.
    pub floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { step: 1e-3, floor: 1e-8 }
    }
}

fn gradient_on<T: Real, F: ScalarFn>(f: &F, x0: &[f32]) -> Result<Vec<f64>> {
    let mut tape = Tape::<T>::new();
    let coords: Vec<T> = x0.iter().map(|v| T::from_f32(*v)).collect();
    let xt = TensorBase::from_vec(vec![x0.len()], coords)?.with_requires_grad();
    let x = tape.leaf(&xt);
    let loss = f.build(&mut tape, x)?;
    tape.backward(loss)?;
    let g = tape
        .grad(x)
        .ok_or_else(|| CoreError::MissingGrad("input coordinates".into()))?;
    Ok(g.iter().map(|v| v.as_f64()).collect())
}

/// Backward-pass gradient of `f` at `x0`, computed on an `f64` tape.
pub fn analytic_gradient<F: ScalarFn>(f: &F, x0: &[f32]) -> Result<Vec<f64>> {
    gradient_on::<f64, F>(f, x0)
}

/// Backward-pass gradient on an `f32` tape (what training actually runs),
/// widened for comparison.
pub fn analytic_gradient_f32<F: ScalarFn>(f: &F, x0: &[f32]) -> Result<Vec<f64>> {
    gradient_on::<f32, F>(f, x0)
}

/// Central-difference gradient of `f` at `x0`, evaluated entirely in `f64`.
pub fn numeric_gradient<F: ScalarFn>(f: &F, x0: &[f32], step: f64) -> Result<Vec<f64>> {
    let base: Vec<f64> = x0.iter().map(|v| *v as f64).collect();
    let eval = |coords: &[f64]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let xt = TensorBase::from_vec(vec![coords.len()], coords.to_vec())?;
        let x = tape.leaf(&xt);
        let loss = f.build(&mut tape, x)?;
        if tape.data(loss).len() != 1 {
            return Err(CoreError::InvalidDimension {
                op: "numeric_gradient",
                msg: "function under test must produce a scalar".into(),
            });
        }
        Ok(tape.item(loss))
    };
    let mut grad = vec![0f64; base.len()];
    let mut pert = base.clone();
    for i in 0..base.len() {
        pert[i] = base[i] + step;
        let up = eval(&pert)?;
        pert[i] = base[i] - step;
        let down = eval(&pert)?;
        pert[i] = base[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Compares backward-pass and finite-difference gradients coordinate by
/// coordinate.
pub fn check<F: ScalarFn>(f: &F, x0: &[f32], cfg: FdConfig) -> Result<GradReport> {
    let analytic = analytic_gradient(f, x0)?;
    let numeric = numeric_gradient(f, x0, cfg.step)?;
    Ok(compare(&analytic, &numeric, cfg.floor))
}

/// Maximum relative error of backward vs central differences; the headline
/// number quoted by the gradcheck command.
pub fn grad_check<F: ScalarFn>(f: &F, x0: &[f32], h: f64) -> Result<f64> {
    Ok(check(f, x0, FdConfig { step: h, ..FdConfig::default() })?.max_rel_err)
}

/// Relative-error comparison used by [`check`]; exposed so model-level
/// harnesses that compute the analytic side in one shared backward pass can
/// reuse the same definition.
pub fn compare(analytic: &[f64], numeric: &[f64], floor: f64) -> GradReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut rel_err = Vec::with_capacity(analytic.len());
    let mut max_rel_err = 0f64;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor);
        let e = (a - n).abs() / denom;
        if e > max_rel_err {
            max_rel_err = e;
            worst_index = i;
        }
        rel_err.push(e);
    }
    GradReport {
        rel_err,
        max_rel_err,
        worst_index,
        analytic: analytic.to_vec(),
        numeric: numeric.to_vec(),
    }
}
