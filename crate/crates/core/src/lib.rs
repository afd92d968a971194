//! Local canopy-height regression from multi-band raster imagery.
//!
//! The crate covers the whole workflow at desk scale: bit-exact raster I/O
//! and preprocessing, site-level cross-validation splits, a small fully
//! convolutional regressor with hand-rolled backprop, a random-forest
//! baseline, stratified evaluation, biomass calibration, and a
//! deterministic experiment runner with a synthetic data generator.
//!
//! Everything downstream of a seed is reproducible: reruns with the same
//! seed and config produce bitwise-identical rasters and checkpoints.

pub mod error;
pub mod evaluation;
pub mod forest;
pub mod geodata;
pub mod nnet;
pub mod pipeline;
pub mod raster;
pub mod seeding;
pub mod splits;
pub mod training;

pub use error::{Error, Result};
pub use raster::{ChannelStats, GeoTransform, Grid, ResampleMethod, Stack};
