//! Weight-space safety restoration for LoRA adapters.
//!
//! The crate trains neural translators that map the weights of an unsafe
//! (domain-only) LoRA adapter onto their safety-aligned counterparts, then
//! applies them zero-shot to unseen adapters. It ships four translator
//! families (MLP, autoencoder, conditional VAE, conditional flow matching),
//! a depth-dynamic mixture-of-experts router blending a surgical and an
//! aggressive expert, linear baselines, a synthetic toy model for forging
//! genuine unsafe/safe adapter pairs at desk scale, and the evaluation
//! metrics for the safety-utility trade-off.

pub mod baseline;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod lora;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod router;
pub mod svd;
pub mod translator;
pub mod tensor;
pub mod toyforge;

pub use error::{Error, Result};
pub use tensor::Tensor2D;
