//! Dense visual features for segmentation and localization.
//!
//! - [`geometry`]: invertible image transforms and transform sets
//! - [`featurize`]: patch featurizers and transform-ensemble upsampling
//! - [`cas`]: class-agnostic segmentation by clustering and merging
//! - [`detect`]: boxes, saliency masks and localization metrics
//! - [`pixelclf`]: filter banks and pixel classifiers for sparse labels
//! - [`store`]: datasets, image conforming, feature cache and sessions
//! - [`pipeline`]: the unsupervised and weakly supervised workflows
//! - [`synthetic`]: generated fixtures with known answers

pub mod cas;
pub mod detect;
pub mod fmap;
pub mod geometry;
pub mod featurize;
pub mod indexed;
pub mod pipeline;
pub mod pixelclf;
pub mod raster;
pub mod store;
pub mod synthetic;

pub use raster::{Image, Raster};
