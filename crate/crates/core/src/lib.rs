//! Gaussian-splatting pre-training for point cloud backbones.
//!
//! A point cloud, optionally fused with frozen 2D image features, is mapped
//! by a small encoder–decoder to one Gaussian primitive per point. The
//! primitives are splatted into novel views and the whole stack is trained
//! against pixel-level supervision.

// Negated float comparisons deliberately treat NaN as failing the check.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod backbone;
pub mod camera;
pub mod cloud;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod gaussians;
pub mod image;
pub mod image_branch;
pub mod io;
pub mod loss;
pub mod model;
pub mod probe;
pub mod render;
pub mod train;

pub use camera::{Camera, Extrinsics, Intrinsics, PixelCorrespondence};
pub use cloud::PointCloud;
pub use error::{Error, Result};
pub use gaussians::{GaussianSet, RawGaussianParams};
pub use image::ImageTensor;
pub use render::{GaussianGrads, RenderOutput};
