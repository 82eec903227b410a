//! Evaluation harness for touch-dynamics continuous authentication.

pub mod classify;
pub mod dataset;
pub mod features;
pub mod preprocess;
pub mod rng;
pub mod metrics;
pub mod synthgen;
pub mod protocol;
pub mod experiments;
pub mod config;

pub use classify::{ClassifierKind, Hyperparameters, Model};
pub use dataset::{Dataset, DeviceSpec};
pub use experiments::{ExperimentSpec, ResultRecord, Variant};
pub use metrics::{EerSummary, MeanRoc};
pub use preprocess::Direction;
pub use protocol::{AttackerMode, ProtocolConfig, SplitStrategy};
pub use synthgen::SynthConfig;
