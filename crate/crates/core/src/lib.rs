//! Point label upgrading.
//!
//! Single-point object annotations are turned into pseudo boxes and masks:
//! a per-pixel semantic response is predicted from (optionally meta-feature
//! guided) features, then every pixel is assigned to the labeled point it can
//! reach most cheaply along a shortest path, or to background.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix `f64`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod annotation;
pub mod checkpoint;
pub mod color;
pub mod error;
pub mod eval;
pub mod featext;
pub mod gradcheck;
pub mod grid;
pub mod ilg;
pub mod image;
pub mod losses;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod sempred;
pub mod study;
pub mod train;

pub use annotation::{AssignmentMap, BBox, DatasetFile, Mask, PointAnnotation};
pub use color::{srgb_to_lab, LabColor};
pub use error::{Error, Result};
pub use featext::FilterBankSpec;
pub use image::{load_image, save_image, ImageGrid};
pub use rng::SeedStreams;
pub use scalar::Scalar;
pub use sempred::MetaUpdate;

pub type FeatureMap = featext::FeatureMap<f64>;
pub type SemanticMap = sempred::SemanticMap<f64>;
pub type MetaFeatureBank = sempred::MetaFeatureBank<f64>;
pub type PlugModel = sempred::PlugModel<f64>;
