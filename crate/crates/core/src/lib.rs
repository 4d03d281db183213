//! Dynamic scene reconstruction with deformable 3D Gaussians.

pub mod buffer;
pub mod camera;
pub mod error;
pub mod gaussians;
pub mod knn;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod ply;
pub mod deform;
pub mod rasterizer;
pub mod scenegen;
pub mod trainer;
pub mod viewformer;

pub use error::{Error, Result};
