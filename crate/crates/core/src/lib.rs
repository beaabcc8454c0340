//! Staged multimodal sub-type classification.
//!
//! A subject is first classified from textualized tabular data; when the
//! prediction is not confident enough the classifier acquires MRI, then PET,
//! fusing every feature seen so far and scoring it against embedded
//! diagnostic criteria.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below fix the common choice.

pub mod autodiff;
pub mod data;
pub mod disentangle;
pub mod encoders;
pub mod error;
pub mod fusion_align;
pub mod harness;
pub mod model;
pub mod nn;
pub mod progressive;
pub mod scalar;

pub use data::{SubType, SubjectRecord};
pub use error::{Error, Result};
pub use harness::{EvalReport, TrainConfig};
pub use model::{Ablations, Model, ModelConfig};
pub use progressive::{PolicyConfig, StageDecision};
pub use scalar::Scalar;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Checkpoint32 = harness::Checkpoint<f32>;
pub type Checkpoint64 = harness::Checkpoint<f64>;
