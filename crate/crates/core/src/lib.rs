//! Spatially regularized concept-embedding adaptation on a toy
//! cross-attention diffusion backbone.

pub mod adapter;
pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod error;
pub mod framing;
pub mod imaging;
pub mod optim;
pub mod regularizer;
pub mod rng;
pub mod schedule;
pub mod splitmerge;
pub mod synth;
pub mod tagkit;
pub mod types;

pub use adapter::{adapt, AdaptOutcome, Reference};
pub use backbone::{AttentionRecord, Backbone, Conditioning};
pub use config::{validate_config, AdaptationConfig};
pub use error::{Result, SealError};
pub use splitmerge::AuxiliarySet;
pub use types::{
    AttentionMap, ConceptEmbedding, LayerCatalog, LayerDesc, LayerDiagnostic, ObjectMask,
    StepRecord, TrajectoryLog,
};
