//! AdaDelta with multiplicative epsilon decay.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Parameter};
use crate::tensor::Tensor;

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_EPS_DECAY: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct AdaDeltaState {
    pub accum_grad_sq: Tensor,
    pub accum_update_sq: Tensor,
    pub rho: f64,
    pub eps: f64,
}

impl AdaDeltaState {
    pub fn new(shape: &[usize], rho: f64, eps: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Argument(format!("rho must lie in (0, 1), got {rho}")));
        }
        if !(eps > 0.0) {
            return Err(Error::Argument(format!("eps must be positive, got {eps}")));
        }
        Ok(AdaDeltaState {
            accum_grad_sq: Tensor::zeros(shape),
            accum_update_sq: Tensor::zeros(shape),
            rho,
            eps,
        })
    }
}

/// One AdaDelta update of `p` with learning rate `lr`, then zeroes the
/// gradient. A parameter whose gradient is zero everywhere is left
/// untouched, accumulators included.
pub fn adadelta_step(p: &mut Parameter, st: &mut AdaDeltaState, lr: f64) -> Result<()> {
    if p.frozen {
        return Err(Error::Contract(format!("optimizer step on frozen parameter `{}`", p.name)));
    }
    if st.accum_grad_sq.shape() != p.value.shape() {
        return Err(Error::shape("adadelta", p.value.shape(), st.accum_grad_sq.shape()));
    }
    if p.grad.data().iter().all(|&g| g == 0.0) {
        return Ok(());
    }
    let (rho, eps) = (st.rho, st.eps);
    let grad = p.grad.data_mut();
    let value = p.value.data_mut();
    let eg = st.accum_grad_sq.data_mut();
    let ed = st.accum_update_sq.data_mut();
    for i in 0..grad.len() {
        let g = grad[i];
        eg[i] = rho * eg[i] + (1.0 - rho) * g * g;
        let delta = -((ed[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g;
        ed[i] = rho * ed[i] + (1.0 - rho) * delta * delta;
        value[i] += lr * delta;
        grad[i] = 0.0;
    }
    Ok(())
}

/// `eps ← eps · factor` for `factor` in `(0, 1)`.
pub fn eps_decay(st: &mut AdaDeltaState, factor: f64) -> Result<()> {
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::Argument(format!("eps decay factor must lie in (0, 1), got {factor}")));
    }
    st.eps *= factor;
    Ok(())
}

/// AdaDelta over every trainable parameter of a store.
#[derive(Debug, Clone)]
pub struct AdaDelta {
    states: Vec<(ParamId, AdaDeltaState)>,
    pub lr: f64,
}

impl AdaDelta {
    pub fn new(store: &ParamStore, lr: f64, rho: f64, eps: f64) -> Result<Self> {
        let states = store
            .trainable()
            .map(|id| Ok((id, AdaDeltaState::new(store.value(id).shape(), rho, eps)?)))
            .collect::<Result<_>>()?;
        Ok(AdaDelta { states, lr })
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (id, st) in &mut self.states {
            adadelta_step(store.get_mut(*id), st, self.lr)?;
        }
        Ok(())
    }

    pub fn decay_eps(&mut self, factor: f64) -> Result<()> {
        for (_, st) in &mut self.states {
            eps_decay(st, factor)?;
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        self.states.first().map_or(DEFAULT_EPS, |(_, s)| s.eps)
    }
}
