//! Minibatch plumbing shared by the LM and ASR trainers.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{AdaDelta, DEFAULT_EPS, DEFAULT_EPS_DECAY, DEFAULT_RHO};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    /// Factor applied to eps whenever the dev loss fails to improve.
    pub eps_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1.0,
            rho: DEFAULT_RHO,
            eps: DEFAULT_EPS,
            eps_decay: DEFAULT_EPS_DECAY,
            grad_clip: 5.0,
        }
    }
}

/// Accumulates the mean gradient of `loss` over `batch` into the store and
/// returns the summed loss value.
pub(crate) fn accumulate_batch<T, F>(store: &mut ParamStore, batch: &[T], loss: F) -> Result<f64>
where
    F: Fn(&mut Tape, &T) -> Result<Var>,
{
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for item in batch {
        let grads = {
            let mut tape = Tape::new(store);
            let l = loss(&mut tape, item)?;
            let v = tape.scalar(l);
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss {v}")));
            }
            total += v;
            tape.backward(l)?
        };
        store.accumulate(&grads, scale);
    }
    Ok(total)
}

pub(crate) fn apply_step(store: &mut ParamStore, opt: &mut AdaDelta, grad_clip: f64) -> Result<()> {
    if grad_clip > 0.0 {
        let norm = store.grad_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient norm".into()));
        }
        if norm > grad_clip {
            store.scale_grads(grad_clip / norm);
        }
    }
    opt.step(store)
}

/// Eval-only mean of `loss` over `items`.
pub(crate) fn mean_loss<T, F>(store: &ParamStore, items: &[T], loss: F) -> Result<f64>
where
    F: Fn(&mut Tape, &T) -> Result<Var>,
{
    if items.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for item in items {
        let mut tape = Tape::inference(store);
        let l = loss(&mut tape, item)?;
        total += tape.scalar(l);
    }
    Ok(total / items.len() as f64)
}
