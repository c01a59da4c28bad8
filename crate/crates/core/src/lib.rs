//! Core library for the mammonet pipeline: classification of pre-segmented
//! breast masses in mammograms as benign or malignant.
//!
//! The pipeline stages map onto the modules below:
//!
//! - [`dataset`]: corpus scanning and patient-disjoint, class-balanced splits
//! - [`roi`]: bounding boxes from masks and fixed-size context patches
//! - [`augment`]: offline rotation/crop augmentation and train-time mirroring
//! - [`models`]: network construction, initialization and learning-rate
//!   multiplier schemes
//! - [`train`]: optimization loop, curves and checkpoints
//! - [`eval`]: predictions and confusion-derived metrics
//! - [`saliency`]: input-gradient attribution maps
//! - [`config`]: flat key-value run configuration with content fingerprints
//! - [`synth`]: synthetic desk-scale corpora for tests and demos

pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod optim;
pub mod raster;
pub mod roi;
pub mod saliency;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
