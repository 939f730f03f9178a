//! Part relation attention and component-adaptive triplet loss for
//! heterogeneous (NIR ↔ VIS) face matching, with a small reverse-mode
//! autodiff engine, a synthetic two-domain face generator, and
//! identification/verification metrics.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod losses;
pub mod mask;
pub mod model;
pub mod optim;
pub mod param;
pub mod pram;
pub mod sampler;
pub mod suites;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use backbone::{Backbone, BackboneConfig, ConvStage, Part, PartFeatureSet, NUM_PARTS};
pub use config::{CatMode, Mining, TrainConfig};
pub use dataset::{Dataset, Domain, FaceSample};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use losses::{ComponentWeights, LossConfig, ScaleMode};
pub use mask::{BinaryMask, BoundingBox, CropWindow};
pub use model::{BatchInputs, ModelConfig, PramModel};
pub use param::{ParamId, ParamStore, Parameter};
pub use pram::{RelationAttention, NUM_RELATIONS, RELATION_PAIRS};
pub use sampler::{NegativeDomain, Triplet};
pub use synth::{GenConfig, Perturbation};
pub use tensor::{DType, Scalar, Tensor};
pub use trainer::{StepLog, Trainer};
