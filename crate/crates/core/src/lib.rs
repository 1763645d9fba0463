//! Differentiable frontability rasterization for 3D morphable face models.
//!
//! The crate is organized bottom-up:
//!
//! - [`model`]: the linear shape model, its file format, normals and masks.
//! - [`camera`]: weak-perspective projection and its Jacobian.
//! - [`render`]: the visualization layer with an analytic backward pass.
//! - [`loss`]: parameter and landmark losses, NME and MAPE.
//! - [`fit`]: landmark fitting, initialization and box jitter.
//! - [`dataset`]: synthetic faces with ground-truth parameters.
//! - [`nn`]: a small trainable stack of visualization blocks.
//! - [`gradcheck`]: finite-difference verification of all analytic gradients.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bbox;
pub mod annotation;
pub mod camera;
pub mod dataset;
pub mod error;
pub mod fit;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod render;

pub use bbox::BBox;
pub use camera::{CameraMatrix, LandmarkSet, ParamVector};
pub use error::{Error, Result};
pub use model::{MaskKind, ShapeModel, ShapeParams};
pub use render::{RasterConfig, VisualizationOutput};
