//! Multimodal multiview video transformer: variant notation, audio and
//! visual input pipelines, the model, its trainer, and logit ensembling.

pub mod audio;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod model_spec;
pub mod rng;
pub mod synthetic;
pub mod trainer;
pub mod visual;

pub use error::{CoreError, Result};
pub use model::{MMModel, ModelConfig, ModelInputs};
pub use model_spec::{parse_model_spec, BackboneSize, EncoderDims, Modality, ModelSpec, ViewSpec};
