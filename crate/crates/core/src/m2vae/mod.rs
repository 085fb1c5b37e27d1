//! Multi-modal VAE: per-subset encoders, per-modality decoders, ELBO
//! training and decode-then-re-encode belief fusion.

mod dataset;
mod embedding;
mod model;

pub use dataset::{generate_dataset, read_dataset, write_dataset, Sample};
pub use embedding::{LatentEmbedding, ObservationSet};
pub use model::{ElboOutput, M2Vae, VaeConfig, VaeGrads, MAX_VAE_MODALITIES};
