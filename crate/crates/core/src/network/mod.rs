//! Backbone, recurrent memory with ego-motion compensation, detection head,
//! and the per-frame orchestration.

mod backbone;
mod head;
mod memory;
mod model;

pub use backbone::{Backbone, BackboneCache, BackboneConfig, ConvBnRelu, UpBlock};
pub use head::{DetectionHead, HeadCache, HeadOutput, NUM_CLASSES};
pub use memory::{
    broadcast_transform, AuxCache, AuxHead, CompensationCache, CompensationConv, ConvGru, GruCache,
};
pub use model::{
    AuxOutput, Compensation, HiddenState, MemoryConfig, MemoryModule, MemoryPlacement, Model,
    ModelConfig, Step, StepCache, StepGrads,
};
