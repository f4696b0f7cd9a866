//! Solid texture synthesis from 2D exemplars: a point-wise MLP sampler over
//! learned noise octaves, trained adversarially on random planar slices.

pub mod adaptation;
pub mod checkpoint;
pub mod commands;
pub mod conditioning;
pub mod critic;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod losses;
pub mod model;
pub mod noise_field;
pub mod params;
pub mod sampler;
pub mod slicer;
pub mod trainer;

pub use error::{Error, Result};
pub use params::equalized_parameter_scale;
