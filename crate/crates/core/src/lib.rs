//! Contextual enhancement of fiber orientation distributions (FODs) on the
//! coupled space of positions and orientations, together with the pieces of
//! a diffusion-MRI tractography pipeline around it:
//!
//! * [`geometry`]: orientation sampling, rotations, the shift-twist group
//!   product and a real, even-order spherical-harmonic basis.
//! * [`kernel`]: the closed-form contour-enhancement kernel, its sparse
//!   lookup table and a Monte Carlo sample-path simulator.
//! * [`fodfield`]: FOD volumes, shift-twist convolution, sharpening and
//!   peak extraction.
//! * [`csd`]: constrained spherical deconvolution, response estimation,
//!   tensor fitting and the tensor-derived FOD.
//! * [`tracking`]: deterministic and probabilistic streamline tracking.
//! * [`fbc`]: fiber-to-bundle coherence and tractogram filtering.
//! * [`evaluate`] and [`phantom`]: ground-truth phantoms and quality metrics.
//! * [`io`] and [`pipeline`]: file formats and the end-to-end driver.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod csd;
pub mod error;
pub mod evaluate;
pub mod fbc;
pub mod fodfield;
pub mod geometry;
pub mod io;
pub mod kernel;
pub mod phantom;
pub mod pipeline;
pub mod tracking;

pub use error::{Error, Result};
pub use fodfield::{FodField, PeakSet};
pub use geometry::sh::ShCoefficients;
pub use geometry::tessellation::OrientationSet;
pub use geometry::{Rotation, UnitVector, Vec3};
pub use kernel::{EnhancementKernel, KernelParams};
pub use tracking::{Streamline, Tractogram};
