//! Explainable activity recognition for smart homes.
//!
//! The pipeline: binary sensor event logs are parsed and segmented into
//! labeled time windows ([`ingest`]), each window becomes a spatiotemporal
//! directed graph ([`graphbuild`]), a compact graph neural network classifies
//! the Activity of Daily Living ([`model`], trained by [`train`] on the
//! autodiff core in [`tensor`]), an edge-mask explainer extracts the
//! important subgraph behind each prediction ([`explain`]), and the subgraph
//! is rendered as a natural-language sentence ([`narrate`]).

pub mod explain;
pub mod graphbuild;
pub mod ingest;
pub mod model;
pub mod narrate;
pub mod pipeline;
pub mod registry;
pub mod synth;
pub mod tensor;
pub mod train;

pub use graphbuild::{ActivityGraph, FeaturizedGraph};
pub use ingest::{SensorEvent, Window, WindowsFile};
pub use model::{ModelConfig, ModelParams};
pub use registry::{DatasetSpec, Registry, SensorKind, SensorMeta};
