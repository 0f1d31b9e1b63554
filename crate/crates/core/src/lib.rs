//! Deformable 3D Gaussian splatting for reconstructing moving tissue from a
//! single video with per-frame depth maps and tool masks.
//!
//! Pipeline: [`gidm`] seeds a canonical [`GaussianSet`] from depth, the
//! [`deform`] network maps it to each timestamp, [`raster`] renders color and
//! depth, and [`train`] optimizes everything against the masked objectives
//! in [`losses`].

pub mod deform;
pub mod error;
pub mod gaussian_math;
pub mod gidm;
pub mod io;
pub mod knn;
pub mod losses;
pub mod raster;
pub mod real;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use scene::{Camera, FrameRecord, GaussianGrads, GaussianSet, Grid, Mask, RenderOutput};
