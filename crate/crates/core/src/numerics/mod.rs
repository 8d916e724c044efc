//! Tensor storage, seeded randomness and the storage codecs.

pub mod fp16;
pub mod q8;
mod rng;
mod tensor;
pub mod tns;

pub use fp16::{fp16_roundtrip, Fp16Roundtrip};
pub use q8::{q8_decode, q8_encode, QuantBlock8};
pub use rng::{gaussian, Rng};
pub(crate) use rng::mix;
pub use tensor::Tensor;
