//! Dual-network visual tracker.
//!
//! Frames are cropped around the previous target estimate, passed through a
//! frozen VGG-style backbone, adapted by a small per-stream network trained
//! online, and reduced to a single heat map per stream with one-unit ICA
//! guided by a boundary-weighted reference. Candidate boxes drawn from a
//! Gaussian motion model are scored on those maps.

pub mod checkpoint;
pub mod config;
pub mod dualnet;
pub mod error;
pub mod features;
pub mod geometry;
pub mod icar;
pub mod image;
pub mod synth;
pub mod tensor;
pub mod tracking;

pub use error::{DntError, Result};
pub use geometry::Rect;
