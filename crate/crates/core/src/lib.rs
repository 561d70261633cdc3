//! Convolutional filter estimation from image markers (FLIM), multi-step
//! first-layer filter selection, and a shallow dual-encoder U-Net for
//! glioblastoma-like segmentation.

pub mod cluster;
pub mod conv;
pub mod error;
pub mod flim;
pub mod markers;
pub mod metrics;
pub mod msflim;
pub mod patch;
pub mod phantom;
pub mod pipeline;
pub mod seed;
pub mod sunet;
pub mod volume;

pub use error::{Error, Result};
