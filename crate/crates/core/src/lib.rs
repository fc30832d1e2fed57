//! Geometric core for placing 3D objects into monocular video.

pub mod depth;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod mesh;
pub mod placement;
pub mod raster;
pub mod recon;
pub mod render;
pub mod scba;
pub mod splat;
pub mod synthetic;
