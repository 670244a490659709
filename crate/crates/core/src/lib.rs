//! Retrieval-based reply suggestion: dual-encoder matching, lexical and MMR
//! diversification, and a latent-intent conditional VAE with constrained
//! sampling and voting.
//!
//! The crate is `no_std` + `alloc`. File formats, the CLI and the HTTP
//! service live in the `smartreply` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod diversify;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod lm;
pub mod matching;
pub mod mcvae;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, Params};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
