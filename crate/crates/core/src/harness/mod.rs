//! Synthetic task generation and experiment orchestration.

pub mod corpus;
pub mod experiment;
pub mod gradsuite;
pub mod toy;

pub use corpus::{gen_corpus, read_manifest, CorpusFiles, CorpusSizes, ToyTask};
pub use experiment::{run_experiment, ExperimentManifest, Report, ReportRow};
pub use gradsuite::{fusion_gradcheck, GradReport, GradSuiteConfig};
pub use toy::{synth_features, FeatureStats, Grammar, ToyTaskConfig};
