//! Differentiable 2D Gaussian surfel splatting and sparse-view surface
//! reconstruction.
//!
//! The crate ingests foundation-model style pointmaps and correspondences,
//! aligns them globally, instantiates oriented surfels, optimizes surfels
//! and camera poses jointly against photometric, geometric, correspondence
//! and color-variance objectives, and extracts a triangle mesh by TSDF
//! fusion. A synthetic scene generator and a metric suite (Rel, normal
//! consistency, ATE, PSNR, SSIM) make the pipeline self-contained.
//!
//! Start with the runnable programs under `examples/`, one per capability.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod meshing;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod pointmap;
pub mod real;
pub mod render;
pub mod sh;
pub mod surfel;

pub use error::{Error, Result};
