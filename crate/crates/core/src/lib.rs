//! Change detection on deformable Gaussian scenes.
//!
//! A scene is a Gaussian cloud with per-epoch deformation tables. Rendering
//! it from co-posed viewpoints at both epochs, diffing instance IDs, and
//! fitting per-Gaussian classification encodings to the resulting masks
//! yields a cloud that can render change maps from any viewpoint.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod knn;
pub mod maps;
pub mod math;
pub mod partition;
pub mod pipeline;
pub mod pose_interp;
pub mod rasterizer;
pub mod scene;
pub mod segmentation;

pub use error::{Error, Result};
