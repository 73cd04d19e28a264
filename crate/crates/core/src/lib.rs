//! Iterative mid-level discriminative pattern learning.
//!
//! Patches are sampled densely from person boxes, embedded by a small
//! dual-stream (patch + whole-box context) convolutional network, turned into
//! transactions and mined for class-specific association patterns. The
//! resulting patch clusters get LDA detectors, are purified by score
//! thresholding, and are used as labels to retrain the patch network. The
//! loop repeats until the validation metric stops improving. Images are
//! finally encoded by a 2-level spatial pyramid of max detector scores,
//! concatenated with a holistic embedding, and classified by linear
//! one-vs-rest models.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! parsing and the command line live in the `midlevel` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod datamodel;
pub mod detectors;
pub mod embednet;
pub mod encoder;
mod error;
pub mod image;
pub mod metrics;
pub mod mining;
pub mod patchgrid;
pub mod pipeline;
pub mod rng;

pub use crate::error::{Error, Result};
