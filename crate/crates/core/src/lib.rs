//! Autolabeling of 3D objects from 2D labels and sparse LIDAR by
//! differentiable rendering of a latent SDF shape space.

pub mod alignment;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod isosurface;
pub mod metrics;
pub mod pipeline;
pub mod renderer;
pub mod shapespace;

pub use error::{Error, Result};
