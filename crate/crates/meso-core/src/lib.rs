//! Feature-free mesoscopic photogrammetry.
//!
//! Jointly registers and stitches close-range multi-view image sequences
//! into an orthorectified RGB mosaic plus a quantitative height map, by
//! optimizing per-image 6D camera pose, a nonparametric radial
//! undistortion model, and CNN-reparameterized camera-centric height maps
//! against a pixel-intensity reprojection loss.
//!
//! The crate is organized around the stages of that optimization:
//!
//! - [`geometry`]: camera model and all coordinate transforms (tilted
//!   backprojection, orthorectification, rectification to an arbitrary
//!   reference frame, autofocus bookkeeping).
//! - [`distortion`]: piecewise-linear radial (un)distortion with an
//!   optimizable principal point, plus even-polynomial baselines.
//! - [`autodiff`]: a minimal reverse-mode differentiation engine covering
//!   every primitive the pipeline needs.
//! - [`dipnet`]: the untrained encoder-decoder CNN that reparameterizes
//!   the camera-centric height maps.
//! - [`pipeline`]: the end-to-end multi-scale optimization loop.
//! - [`synthlab`]: a forward renderer for synthetic ground-truth scenes
//!   and quantitative height evaluation.
//!
//! The crate is `no_std`-compatible (requires `alloc`); enable the `libm`
//! feature when building without `std`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("meso-core requires either the `std` or the `libm` feature");

pub(crate) mod math;

pub mod autodiff;
pub mod dipnet;
pub mod distortion;
pub mod geometry;
pub mod pipeline;
pub mod synthlab;
