//! Geometry, rendering and evaluation primitives for building dense
//! reference disparity maps from a registered 3D model and a rectified
//! stereo rig.

// `!(x > 0.0)` style checks are intended to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod image;
pub mod mesh;
pub mod metrics;
pub mod posefile;
pub mod reference;
pub mod render;
pub mod rig;
pub mod se3;
