//! Semantics-aware photometric losses, view synthesis and evaluation metrics
//! for unsupervised monocular depth and ego-motion.

pub mod camera;
pub mod error;
pub mod fit;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod oracle;
pub mod raster;
pub mod scene;
pub mod warp;

pub use camera::{Intrinsics, Pixel, Point3, Pose};
pub use error::{Error, Result};
pub use raster::{DepthMap, Image, LabelMap, Mask, Raster};

/// Default maximum evaluation depth in meters.
pub const DEFAULT_DEPTH_CAP: f64 = 80.0;
