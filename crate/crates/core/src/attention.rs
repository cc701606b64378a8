//! Location-aware additive attention.
//!
//! The energy of frame `j` is `gᵀ tanh(W_enc h_j + b + W_dec s + W_loc f_j)`
//! where `f_j` is row `j` of a same-padded convolution of the previous
//! attention weights.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, INIT_SCALE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Width of the energy layer.
    pub dim: usize,
    pub channels: usize,
    /// Convolution width; must be odd.
    pub width: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            dim: 32,
            channels: 10,
            width: 5,
        }
    }
}

/// Previous attention weights over the encoder frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub weights: Tensor,
}

impl AttentionState {
    /// Uniform weights over `frames` frames.
    pub fn uniform(frames: usize) -> Self {
        AttentionState {
            weights: Tensor::filled(&[frames], 1.0 / frames as f64),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub config: AttentionConfig,
    pub w_enc: ParamId,
    pub b: ParamId,
    pub w_dec: ParamId,
    pub conv: ParamId,
    pub w_loc: ParamId,
    pub g: ParamId,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: AttentionConfig,
        enc_dim: usize,
        dec_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if config.width % 2 == 0 || config.dim == 0 || config.channels == 0 {
            return Err(Error::Config(format!("invalid attention config {config:?}")));
        }
        let u = Init::Uniform(INIT_SCALE);
        let a = config.dim;
        Ok(AttentionParams {
            config,
            w_enc: store.add(&format!("{prefix}.w_enc"), &[a, enc_dim], u, seed)?,
            b: store.add(&format!("{prefix}.b"), &[a], Init::Zeros, seed)?,
            w_dec: store.add(&format!("{prefix}.w_dec"), &[a, dec_dim], u, seed)?,
            conv: store.add(&format!("{prefix}.conv"), &[config.channels, config.width], u, seed)?,
            w_loc: store.add(&format!("{prefix}.w_loc"), &[a, config.channels], u, seed)?,
            g: store.add(&format!("{prefix}.g"), &[a], u, seed)?,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str, config: AttentionConfig) -> Result<Self> {
        let r = |n: &str| store.require(&format!("{prefix}.{n}"));
        Ok(AttentionParams {
            config,
            w_enc: r("w_enc")?,
            b: r("b")?,
            w_dec: r("w_dec")?,
            conv: r("conv")?,
            w_loc: r("w_loc")?,
            g: r("g")?,
        })
    }

    /// The decoder-independent part `W_enc h_j + b` for all frames, `[T, A]`.
    pub fn precompute(&self, tape: &mut Tape, enc: Var) -> Result<Var> {
        let w = tape.param(self.w_enc);
        let b = tape.param(self.b);
        let proj = tape.matmul_t(enc, w)?;
        tape.add_row_broadcast(proj, b)
    }

    /// One attention step. `enc` is `[T, e]`, `keys` the result of
    /// [`AttentionParams::precompute`], `prev` the previous weights `[T]`.
    /// Returns `(context, weights)`.
    pub fn attend(&self, tape: &mut Tape, enc: Var, keys: Var, s: Var, prev: Var) -> Result<(Var, Var)> {
        let frames = tape.shape(enc)[0];
        if tape.shape(prev) != [frames] {
            return Err(Error::shape("location_attention", tape.shape(enc), tape.shape(prev)));
        }
        let (w_dec, conv, w_loc, g) = (
            tape.param(self.w_dec),
            tape.param(self.conv),
            tape.param(self.w_loc),
            tape.param(self.g),
        );
        let query = tape.matvec(w_dec, s)?;
        let f = tape.conv1d(conv, prev)?;
        let loc = tape.matmul_t(f, w_loc)?;
        let pre = tape.add(keys, loc)?;
        let pre = tape.add_row_broadcast(pre, query)?;
        let act = tape.tanh(pre);
        let energies = tape.matvec(act, g)?;
        let weights = tape.softmax(energies);
        let context = tape.mat_t_vec(enc, weights)?;
        Ok((context, weights))
    }
}

/// Untaped attention step over encoder frames.
pub fn location_attention(
    s: &Tensor,
    enc: &[Tensor],
    prev: &AttentionState,
    params: &AttentionParams,
    store: &ParamStore,
) -> Result<(Tensor, AttentionState)> {
    if enc.is_empty() {
        return Err(Error::Argument("attention over zero frames".into()));
    }
    if prev.weights.len() != enc.len() {
        return Err(Error::shape("location_attention", &[enc.len()], prev.weights.shape()));
    }
    let mut tape = Tape::inference(store);
    let rows: Vec<Var> = enc.iter().map(|e| tape.constant(e.clone())).collect();
    let enc_m = tape.stack_rows(&rows)?;
    let keys = params.precompute(&mut tape, enc_m)?;
    let sv = tape.constant(s.clone());
    let pv = tape.constant(prev.weights.clone());
    let (context, weights) = params.attend(&mut tape, enc_m, keys, sv, pv)?;
    Ok((
        tape.value(context).clone(),
        AttentionState {
            weights: tape.value(weights).clone(),
        },
    ))
}
