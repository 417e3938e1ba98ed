//! Geminated pixel/frequency masked autoencoder.
//!
//! A masked ViT encoder feeds two decoders: a transformer pixel decoder and a
//! frequency decoder whose blocks filter the token grid's 2D spectrum with a
//! learnable real matrix. Training combines pixel MSE, focal frequency loss
//! and two cross-domain consistency terms. Representation analyses
//! (covariance power-law slope, CKA) and a linear probe live in [`analysis`].

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod fourier;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod ppm;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ComplexTensor, Tensor};

// Tape values are short-lived buffers of a few hundred KiB; the system
// allocator maps and unmaps each one.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
