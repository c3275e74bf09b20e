//! White-blood-cell blast classification from scratch.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autograd`], [`rng`]: a dense `f64` tensor, a per-forward-pass
//!   tape with reverse-mode differentiation, and a seeded ChaCha8 random source.
//! - [`nn`]: convolution, batch normalisation, max pooling, activations,
//!   linear layers, bilinear pooling and softmax cross-entropy.
//! - [`stain`]: RGB to optical density conversion and the trainable stain
//!   deconvolution layer.
//! - [`dct`]: orthonormal 2D DCT, cumulative-energy thresholding and signed
//!   log10 normalisation, differentiable end to end.
//! - [`model`]: the basic network, the five pipeline stages and the
//!   checkpoint container.
//! - [`data`]: manifests, subject-level folds, canvas centring, augmentation,
//!   class balancing and the synthetic cell generator.
//! - [`train`]: metrics, momentum SGD, the training loop and hybrid fusion.

pub mod autograd;
pub mod config;
pub mod data;
pub mod dct;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod rng;
pub mod stain;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
