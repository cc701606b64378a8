//! Finite-difference check of the full joint loss on a tiny model, one
//! fusion kind at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::AttentionConfig;
use crate::error::Result;
use crate::fusion::FusionKind;
use crate::gradcheck::{check_params, ParamCheck, GRAD_EPSILON, GRAD_TOLERANCE};
use crate::params::{ParamId, ParamStore};
use crate::rnnlm::{Lm, LmConfig, LM_PREFIX};
use crate::seq2seq::{AttNorm, ModelConfig, Seq2Seq};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSuiteConfig {
    pub alpha: f64,
    /// Decoder steps in the attention term; `None` covers the whole
    /// reference.
    pub att_steps: Option<usize>,
    pub seed: u64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        GradSuiteConfig {
            alpha: 0.5,
            att_steps: Some(1),
            seed: 21,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub kind: FusionKind,
    pub checks: Vec<ParamCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed(GRAD_TOLERANCE))
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Builds the tiny instance (`d = 3`, `V = 4`, three frames, labels
/// `[3, 3]`) and compares backprop with central differences for every
/// trainable parameter. The frozen LM is excluded. Parameters are redrawn
/// from `U(-0.5, 0.5)` so no ReLU input sits at its kink.
pub fn fusion_gradcheck(kind: FusionKind, cfg: &GradSuiteConfig) -> Result<GradReport> {
    const V: usize = 4;
    let mut store = ParamStore::new();
    let lm = if kind.uses_lm() {
        let c = LmConfig {
            vocab_size: V,
            embed: 2,
            units: 3,
            layers: 1,
        };
        Lm::new(&mut store, c, cfg.seed + 1)?;
        store.set_frozen_prefix(LM_PREFIX, true);
        Some(c)
    } else {
        None
    };
    let model_cfg = ModelConfig {
        feat_dim: 2,
        enc_layers: 1,
        enc_units: 2,
        enc_proj: 3,
        embed: 2,
        dec_units: 3,
        attention: AttentionConfig {
            dim: 3,
            channels: 2,
            width: 3,
        },
        vocab_size: V,
        fusion: kind,
        alpha: cfg.alpha,
        att_norm: AttNorm::Token,
    };
    let model = Seq2Seq::new(&mut store, model_cfg, lm, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<ParamId> = store.trainable().collect();
    for &id in &ids {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let feats = Tensor::matrix(3, 2, (0..6).map(|_| StandardNormal.sample(&mut rng)).collect())?;
    let checks = check_params(&store, &ids, GRAD_EPSILON, |tape| {
        Ok(model.loss(tape, &feats, &[3, 3], cfg.att_steps)?.total)
    })?;
    Ok(GradReport { kind, checks })
}
