//! Fixtures shared by the kernel benchmarks: desk-sized random models and
//! synthetic utterances.

use lmfusion_core::harness::{synth_features, FeatureStats, ToyTaskConfig};
use lmfusion_core::rnnlm::LM_PREFIX;
use lmfusion_core::{FusionKind, Lm, LmConfig, ModelConfig, ParamStore, Result, Seq2Seq, Tensor, Vocabulary};

pub const TRANSCRIPT: &str = "abc defg bad";

pub fn vocab() -> Vocabulary {
    Vocabulary::new(ToyTaskConfig::default().chars()).expect("default alphabet")
}

/// Normalized features of [`TRANSCRIPT`] under the default task.
pub fn features() -> Result<Tensor> {
    let cfg = ToyTaskConfig::default();
    let raw = synth_features(TRANSCRIPT, &cfg, 7)?;
    FeatureStats::fit(std::slice::from_ref(&raw))?.apply(&raw)
}

/// A desk-sized model of `kind` with freshly initialized parameters.
pub fn model(kind: FusionKind) -> Result<(Seq2Seq, ParamStore)> {
    let v = vocab().len();
    let mut store = ParamStore::new();
    let lm = if kind.uses_lm() {
        let c = LmConfig::desk(v);
        Lm::new(&mut store, c, 2)?;
        store.set_frozen_prefix(LM_PREFIX, true);
        Some(c)
    } else {
        None
    };
    let cfg = ModelConfig::desk(ToyTaskConfig::default().feat_dim, v, kind);
    let m = Seq2Seq::new(&mut store, cfg, lm, 1)?;
    Ok((m, store))
}

/// A desk-sized LM for shallow fusion.
pub fn lm() -> Result<(Lm, ParamStore)> {
    let mut store = ParamStore::new();
    let lm = Lm::new(&mut store, LmConfig::desk(vocab().len()), 3)?;
    Ok((lm, store))
}
