//! Class-conditioned diffusion synthesis of aortic-dissection CT phantoms.
//!
//! The crate covers the whole pipeline: procedural phantom data, a small
//! conditional denoiser trained with the noise-prediction objective,
//! low-rank adapter fine-tuning with prior preservation, Euler / Euler
//! ancestral / DDPM samplers with classifier-free guidance, and the
//! evaluation metrics (MS-SSIM, Fréchet distance on learned features,
//! Dice, t-SNE).

pub mod config;
pub mod denoiser;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod phantom;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod segcheck;
pub mod trainer;

pub use error::{Error, Result};
