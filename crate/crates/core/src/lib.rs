//! Cortical morphological fingerprinting: sphere flattening, feature rasters,
//! a contrastively trained encoder with excitation fusion, and Top-k identification.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod flatten;
pub mod mesh;
pub mod model;
pub mod raster;
pub mod seed;
pub mod sparse;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
