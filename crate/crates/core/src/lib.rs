//! Passive-sonar vessel classification with time-delay networks and a
//! learnable histogram layer.

pub mod audio;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod features;
pub mod histogram;
pub mod metrics;
pub mod models;
pub mod synth;
pub mod train;

pub use autodiff::{Adagrad, Checkpoint, ParamStore, Real, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use features::{FeatureConfig, FeatureExtractor, FeatureKind, NormStats, TimeFrequencyFeature};
pub use histogram::{HistWindow, HistogramLayer};
pub use audio::{AudioSignal, Segment};
pub use dataset::{DatasetManifest, ManifestEntry, PartitionSpec, Split};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use models::{Model, ModelConfig, ModelKind};
pub use synth::SynthSpec;
pub use train::{ExperimentSummary, HyperParams};
