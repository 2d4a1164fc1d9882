//! Personalized facial capture at desk scale.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`geom`] rigid 2D alignment and pitch/yaw fitting from landmarks
//! * [`features`] pose, expression and lighting curation features
//! * [`index`] hierarchical k-means tree for image retrieval
//! * [`rig`] jaw-skinned linear blendshape rig
//! * [`render`] software rasterizer, UV rasters, region contours and the image loss
//! * [`texture`] photon-map splat/gather texturing and turntable curation
//! * [`transfer`] domain-transfer interface and latent-space dataset curation
//! * [`solver`] block coordinate descent inverse rendering
//! * [`regressor`] staged MLP motion-capture regressor
//!
//! [`io`] holds the on-disk formats and [`fixtures`] the procedural head used
//! by tests, benches and the command line tool.

pub mod error;
pub mod features;
pub mod fixtures;
pub mod geom;
pub mod image;
pub mod index;
pub mod io;
pub mod regressor;
pub mod render;
pub mod rig;
pub mod solver;
pub mod texture;
pub mod transfer;

pub use error::{Error, Result};
pub use geom::{LandmarkSet, Similarity2D, TemplateModel};
pub use image::Image;
pub use rig::{BlendshapeRig, PoseParams};

/// 3D vector type used throughout the crate.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 2D vector type used throughout the crate.
pub type Vec2 = nalgebra::Vector2<f64>;
