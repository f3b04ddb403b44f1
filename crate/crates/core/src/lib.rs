//! Photometric stereo with explicit interreflection modeling.
//!
//! The pipeline recovers surface normals, depth, and reflectance maps from a
//! stack of images taken under distant point lights:
//!
//! * [`classic`]: least-squares Lambertian solve, light-space binning, and
//!   light calibration from a sphere with a specular highlight.
//! * [`robustinit`]: low-rank plus sparse decomposition (partial singular
//!   value thresholding inside ADMM) for outlier-robust initial normals.
//! * [`geometry`] and [`interreflection`]: depth from normals, facets, the
//!   pairwise interreflection kernel, and the iterative normal refinement.
//! * [`autodiff`] and [`irnet`]: a small reverse-mode tensor library and the
//!   test-time inverse-rendering network built on it.
//! * [`forwardsim`]: synthetic scenes with ground truth.

pub mod autodiff;
pub mod classic;
pub mod error;
pub mod eval;
pub mod forwardsim;
pub mod geometry;
pub mod interreflection;
pub mod io;
pub mod irnet;
pub mod kv;
pub mod linalg;
pub mod robustinit;
pub mod types;

pub use error::{Error, Result};
pub use eval::{encode_normals, mean_angular_error};
pub use types::{AlbedoMap, DepthMap, ImageStack, LightSet, Mask, NormalMap, Vec3, VIEW};
