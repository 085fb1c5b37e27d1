//! Active sensing for heterogeneous robot teams.
//!
//! A grid-world simulator ([`world`]) is wrapped into a perceived environment
//! ([`perceived`]) that keeps one Gaussian latent belief per point of interest,
//! updates it with a multi-modal VAE ([`m2vae`]) and pays the KL shift between
//! successive beliefs as reward. A multi-headed DQN ([`agent`]) learns which
//! robot should look at what. [`harness`] ties the stages into a pipeline.
//!
//! Numeric code is generic over [`Real`]; the aliases below fix `f64`, which is
//! what the pipeline uses.

pub mod agent;
pub mod diffnet;
pub mod error;
pub mod harness;
pub mod m2vae;
pub mod perceived;
pub mod scalar;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor64 = diffnet::Tensor<f64>;
pub type Tensor32 = diffnet::Tensor<f32>;
pub type Mlp64 = diffnet::Mlp<f64>;
pub type Mlp32 = diffnet::Mlp<f32>;
pub type M2Vae64 = m2vae::M2Vae<f64>;
pub type M2Vae32 = m2vae::M2Vae<f32>;
pub type Embedding64 = m2vae::LatentEmbedding<f64>;
pub type QNet64 = agent::MultiHeadQNet<f64>;
pub type QNet32 = agent::MultiHeadQNet<f32>;
pub type Env64<'a> = perceived::PerceivedEnv<'a, f64>;
