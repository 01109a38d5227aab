//! Refinement of 7-DoF 3D bounding boxes by denoising points expressed in a
//! box-normalized coordinate frame.

pub mod blob;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod refine;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Box7, NbvCloud, NbvJacobian, Point, PointCloud};
