//! Multi-reference pose-driven video generation at desk scale.
//!
//! Everything is built on a dense `f64` [`tensor::Tensor`]: a procedural
//! turning-character world ([`synthworld`]), pose encoding and dense optical
//! flow ([`poseflow`]), a reference encoder with a lossless latent codec
//! ([`refenc`]), pose-aware prototype aggregation ([`ppa`]), a flow-enhanced
//! U-Net denoiser ([`fpi`]), a v-prediction diffusion loop with DDIM sampling
//! ([`diffusion`]), and image metrics ([`evalkit`]).
//!
//! All public operations are deterministic functions of their inputs and the
//! seeds fed to [`rng::Rng`]; reruns with identical seeds are bit-identical.

pub mod backprop;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod farneback;
pub mod fpi;
pub mod gradcheck;
pub mod gradpath;
pub mod layers;
pub mod model;
pub mod modelcfg;
pub mod parallel;
pub mod params;
pub mod poseflow;
pub mod ppa;
pub mod ppm;
pub mod refenc;
pub mod rng;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
