//! HED-UNet: joint sea-land segmentation and coastline detection.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! network ([`model`]), its loss and training loop ([`training`]), a
//! procedural SAR-like scene generator ([`synthdata`]), the evaluation suite
//! ([`metrics`]), classical baselines ([`baselines`]) and effective receptive
//! field analysis ([`erf`]).

pub mod baselines;
pub mod erf;
pub mod error;
pub mod experiment;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
pub mod io;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod synthdata;
pub mod training;
