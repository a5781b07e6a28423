//! Spatially aware point cloud networks on a self-contained tensor engine.
//!
//! The crate builds up in layers: [`tensor`] is a small reverse-mode
//! autodiff engine, [`layers`] are the shared building blocks, [`graph`]
//! holds the dynamic neighborhood machinery, [`sawnet`] assembles the
//! models, and [`data`]/[`train`] cover the experiment pipeline.

pub mod context;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod rng;
pub mod sawnet;
pub mod tensor;
pub mod train;
pub mod verify;

pub use context::{GraphMode, Mode, RunCtx};
pub use error::{Error, Result};
pub use graph::NeighborGraph;
pub use rng::{derive_seed, rng_from, Prng};
pub use sawnet::{
    EmbeddingKind, EmbeddingSpec, Model, ModelConfig, ModelSpec, Task, Variant,
};
pub use tensor::{DType, Element, GradientMap, IndexTensor, NodeId, Tape, Tensor};
pub use train::{evaluate, evaluate_segmentation, miou, Adam, Metrics, OptimConfig, SegMetrics, TrainSettings};
