//! Attention-based speech recognition with language-model fusion.
//!
//! The crate holds a small reverse-mode autodiff engine, LSTM building blocks,
//! a character RNNLM, a joint CTC/attention sequence-to-sequence model with
//! several fusion variants, beam-search decoding, and a synthetic experiment
//! harness.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod decode;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod gradcheck;
pub mod lstm;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rnnlm;
pub mod seq2seq;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use decode::{beam_search, BeamResult, DecodeConfig, Hypothesis, ShallowLm};
pub use error::{Error, Result};
pub use fusion::{CellUpdate, FusionKind};
pub use harness::{ExperimentManifest, Report, ToyTaskConfig};
pub use metrics::{evaluate, ErrorRates};
pub use params::ParamStore;
pub use rnnlm::{Lm, LmConfig, LoadedLm};
pub use seq2seq::{AttNorm, LoadedModel, ModelConfig, Seq2Seq, Utterance};
pub use tensor::Tensor;
pub use vocab::{TokenId, Vocabulary, BLANK, EOS, SOS};
