//! The network itself: layer blocks, input alignment, configuration, and
//! full-model assembly.

pub mod blocks;
pub mod config;
pub mod model;
pub mod transformer;

pub use blocks::{EdgeConvBlock, SawLayer, SawLayerOut, SharedMlpBlock};
pub use config::{
    ChannelSplit, ModelConfig, SawLayerConfig, Task, TransformerConfig, Variant,
};
pub use model::{
    EmbeddingKind, EmbeddingSpec, Model, ModelSpec, ParallelModel, PointEmbeddingModel,
    SawNetModel,
};
pub use transformer::TransformerNet;
