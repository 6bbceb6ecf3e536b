//! Desk-scale laboratory for pose-conditioned video diffusion
//! transformers: a deterministic synthetic figure world, a tiny latent
//! autoencoder, four interchangeable pose-injection strategies, DDPM
//! training/sampling with joint text conditioning, and evaluation
//! tooling (pixel metrics, pose discrimination, attention diagnostics).

pub mod conditioning;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod evalkit;
pub mod formats;
pub mod latentspace;
pub mod graph;
pub mod numerics;
pub mod params;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
