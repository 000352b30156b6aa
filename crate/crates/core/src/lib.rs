//! Radiance fields on a balanced spherical feature grid.
//!
//! This crate reconstructs large, outward-looking scenes from posed
//! equirectangular images. Geometry and appearance live in two overset
//! partial spherical grids with exponentially growing radial shells, stored
//! as low-rank vector-matrix factors and decoded by a small MLP, with an
//! equirectangular environment map behind everything. Training runs fully
//! on CPU with hand-derived reverse-mode gradients.

mod batch;
pub mod error;
pub mod field;
pub mod geom;
pub mod grid;
pub mod img;
pub mod io;
pub mod metrics;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
