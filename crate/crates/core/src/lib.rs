//! Quantity-consistent multi-object image editing, desk scale.
//!
//! A small diffusion stack built from scratch: a dense-tensor engine with
//! reverse-mode autodiff, stand-in text/image encoders, a feature-compensation
//! attention adapter, a quantity-attention injection adapter, an 11-block
//! transformer U-Net, an MSE trainer with a deterministic sampler, a synthetic
//! multi-object scene generator with an exact counting oracle, and an ablation
//! harness. Everything is CPU-only and bitwise deterministic per seed.

pub mod ablate;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod fecom;
pub mod gradcheck;
pub mod model;
pub mod num;
pub mod optim;
pub mod par;
pub mod qttn;
pub mod rng;
pub mod synthdata;
pub mod tape;
pub mod tensor;

pub use error::MqError;
pub use num::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{ParamStore, Tensor};
