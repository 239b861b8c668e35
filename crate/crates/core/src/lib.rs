//! Road segmentation from superpixel-pooled convolutional features.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`featext`] convolves an image with a single-layer kernel bank and
//!    resizes the responses back to image resolution (the per-pixel
//!    "hypercolumn").
//! 2. [`superpix`] over-segments the image with SLIC at several scales and
//!    pools the hypercolumns into per-region mean/std descriptors.
//! 3. [`forest`] classifies each region with a random forest whose split
//!    nodes are linear SVMs ([`svm`]) trained on a random subset of kernel
//!    channels.
//! 4. [`pipeline`] averages the per-scale confidence maps, multiplies in a
//!    learned location prior and scores the result against ground truth.
//!
//! [`raster`] holds the image, mask and confidence-map types together with
//! binary PNM I/O. [`synthetic`] generates a procedural road dataset and a
//! small Gabor kernel bank for demos and tests.

pub mod error;
pub mod featext;
pub mod forest;
pub mod pipeline;
pub mod raster;
pub mod superpix;
pub mod svm;
pub mod synthetic;

mod seed;

pub use error::{Error, Result};
