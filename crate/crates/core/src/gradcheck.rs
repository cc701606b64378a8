//! Central finite differences, the oracle for every backward pass.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Relative-error bar used throughout the test suites.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Step used with [`GRAD_TOLERANCE`].
pub const GRAD_EPSILON: f64 = 1e-5;

/// `(f(θ + εeᵢ) − f(θ − εeᵢ)) / 2ε` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, theta: &Tensor, epsilon: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Argument(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probe = theta.clone();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - epsilon;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let d = (plus - minus) / (2.0 * epsilon);
        if !d.is_finite() {
            return Err(Error::Evaluation { index: i });
        }
        out.push(d);
    }
    Ok(Tensor::from_parts(theta.shape().to_vec(), out))
}

/// `‖a − b‖∞ / max(1, ‖b‖∞)`, with `b` the reference.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(1.0, f64::max);
    diff / scale
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub max_abs_grad: f64,
}

impl ParamCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.rel_error < tolerance
    }
}

/// Compares backprop against finite differences for every parameter in
/// `ids`. `loss` must rebuild the scalar on the tape it is handed.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], epsilon: f64, loss: F) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let mut scratch = store.clone();
    let mut reports = Vec::with_capacity(ids.len());
    for &id in ids {
        let theta = store.value(id).clone();
        let mut failure = None;
        let fd = finite_diff_grad(
            |th| {
                scratch.get_mut(id).value = th.clone();
                let mut tape = Tape::inference(&scratch);
                match loss(&mut tape) {
                    Ok(v) => tape.scalar(v),
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &theta,
            epsilon,
        );
        scratch.get_mut(id).value = theta.clone();
        if let Some(e) = failure {
            return Err(e);
        }
        let fd = fd?;
        let bp = analytic
            .get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; theta.len()]);
        reports.push(ParamCheck {
            name: store.get(id).name.clone(),
            rel_error: relative_error(&bp, fd.data()),
            max_abs_grad: fd.data().iter().map(|v| v.abs()).fold(0.0, f64::max),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let theta = Tensor::vector(vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &theta, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let theta = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| 4.2, &theta, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_evaluation_names_coordinate() {
        let theta = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let err = finite_diff_grad(|t| if t.data()[1] > 0.0 { f64::INFINITY } else { 0.0 }, &theta, 1e-5)
            .unwrap_err();
        assert!(matches!(err, Error::Evaluation { index: 1 }));
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let theta = Tensor::vector(vec![1.0]).unwrap();
        assert!(finite_diff_grad(|_| 0.0, &theta, 0.0).is_err());
    }
}
