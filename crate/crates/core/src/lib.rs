//! Multimodal, multitemporal masked-autoencoder toolkit for Earth observation.
//!
//! Numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! the common choices.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod encodings;
pub mod error;
pub mod heads;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod presets;
pub mod rng;
pub mod router;
pub mod scalar;
pub mod synth;
pub mod targets;
pub mod temporal;
pub mod tilefile;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model32 = trainer::Model<f32>;
pub type Model64 = trainer::Model<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
