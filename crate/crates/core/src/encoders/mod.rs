//! Stage encoders: the frozen text encoder with its trainable adapter for
//! stage 1, and 3D convolutional encoders for MRI (stage 2) and PET (stage 3).

mod adapter;
mod text;
mod volume;

pub use adapter::{Adapter, AdapterOutput};
pub use text::{load_external_embeddings, TextEmbedding, TextEncoder};
pub use volume::{standardize_volume, ImageFeature, VolumeEncoder, VolumeEncoderConfig};
