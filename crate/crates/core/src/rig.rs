//! Rectified stereo rig: projection matrices, triangulation and the
//! depth/disparity relation.
//!
//! Conventions used throughout the crate:
//!
//! * Continuous image coordinates place the centre of pixel `(i, j)` at
//!   `(i + 0.5, j + 0.5)`.
//! * Camera frame: X right, Y down, Z forward.
//! * `tx` is the baseline, stored positive. The right eye's optical centre sits
//!   at `(tx, 0, 0)` in the left-camera frame and it projects through
//!   `P2 = [f 0 cx2 -tx*f; 0 f cy2 0; 0 0 1 0]` (the OpenCV layout, whose
//!   `P2[0][3]` is negative for a right-hand second camera).
//! * Disparity runs from left to right, `δ = u_l - u_r`, which gives
//!   `δ = tx*f/Z + (cx1 - cx2)` and `Z = tx*f / (δ - (cx1 - cx2))`. The matching
//!   right-image pixel of left pixel `u_l` is `u_r = u_l - δ` on the same row.

use nalgebra::{Matrix3x4, Matrix4, Point3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `cy1 == cy2` for a rig to count as rectified.
pub const ROW_ALIGNMENT_TOLERANCE: f64 = 1e-9;

/// Maximum row difference accepted between corresponding chessboard corners.
pub const CHESSBOARD_ROW_TOLERANCE: f64 = 2.0;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum RigError {
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error("point at or behind the camera (denominator {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("corresponding points differ by {dv} px in row at index {index}; rig is not rectified for them")]
    RectificationViolation { index: usize, dv: f64 },
    #[error("left and right point lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    Left,
    Right,
}

impl Eye {
    pub fn other(self) -> Eye {
        match self {
            Eye::Left => Eye::Right,
            Eye::Right => Eye::Left,
        }
    }
}

/// Rectified stereo camera pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectifiedRig {
    f: f64,
    cx1: f64,
    cy1: f64,
    cx2: f64,
    cy2: f64,
    tx: f64,
    width: u32,
    height: u32,
}

impl RectifiedRig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        f: f64,
        cx1: f64,
        cy1: f64,
        cx2: f64,
        cy2: f64,
        tx: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, RigError> {
        let all = [f, cx1, cy1, cx2, cy2, tx];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(RigError::InvalidRig("non-finite parameter".into()));
        }
        if f <= 0.0 {
            return Err(RigError::InvalidRig(format!("focal length must be positive, got {f}")));
        }
        if tx <= 0.0 {
            return Err(RigError::InvalidRig(format!("baseline term must be positive, got {tx}")));
        }
        if width == 0 || height == 0 {
            return Err(RigError::InvalidRig(format!("image size {width}x{height} is empty")));
        }
        if (cy1 - cy2).abs() > ROW_ALIGNMENT_TOLERANCE {
            return Err(RigError::InvalidRig(format!(
                "principal rows differ (cy1={cy1}, cy2={cy2}); images are not rectified"
            )));
        }
        Ok(Self { f, cx1, cy1, cx2, cy2, tx, width, height })
    }

    /// Rig with both principal points equal.
    pub fn symmetric(f: f64, cx: f64, cy: f64, tx: f64, width: u32, height: u32) -> Result<Self, RigError> {
        Self::new(f, cx, cy, cx, cy, tx, width, height)
    }

    /// Recover the rig from the two rectified projection matrices.
    pub fn from_projections(p1: &Matrix3x4<f64>, p2: &Matrix3x4<f64>, width: u32, height: u32) -> Result<Self, RigError> {
        let f = p1[(0, 0)];
        if (p1[(1, 1)] - f).abs() > 1e-9 * f.abs().max(1.0) || (p2[(0, 0)] - f).abs() > 1e-9 * f.abs().max(1.0) {
            return Err(RigError::InvalidRig("projection matrices disagree on focal length".into()));
        }
        if f <= 0.0 {
            return Err(RigError::InvalidRig(format!("focal length must be positive, got {f}")));
        }
        Self::new(f, p1[(0, 2)], p1[(1, 2)], p2[(0, 2)], p2[(1, 2)], -p2[(0, 3)] / f, width, height)
    }

    pub fn f(&self) -> f64 {
        self.f
    }
    pub fn cx1(&self) -> f64 {
        self.cx1
    }
    pub fn cy1(&self) -> f64 {
        self.cy1
    }
    pub fn cx2(&self) -> f64 {
        self.cx2
    }
    pub fn cy2(&self) -> f64 {
        self.cy2
    }
    pub fn tx(&self) -> f64 {
        self.tx
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Principal point of an eye.
    pub fn principal_point(&self, eye: Eye) -> (f64, f64) {
        match eye {
            Eye::Left => (self.cx1, self.cy1),
            Eye::Right => (self.cx2, self.cy2),
        }
    }

    /// X position of an eye's optical centre in the left-camera frame.
    pub fn eye_offset(&self, eye: Eye) -> f64 {
        match eye {
            Eye::Left => 0.0,
            Eye::Right => self.tx,
        }
    }

    pub fn p1(&self) -> Matrix3x4<f64> {
        Matrix3x4::new(
            self.f, 0.0, self.cx1, 0.0, //
            0.0, self.f, self.cy1, 0.0, //
            0.0, 0.0, 1.0, 0.0,
        )
    }

    pub fn p2(&self) -> Matrix3x4<f64> {
        Matrix3x4::new(
            self.f, 0.0, self.cx2, -self.tx * self.f, //
            0.0, self.f, self.cy2, 0.0, //
            0.0, 0.0, 1.0, 0.0,
        )
    }

    /// Reprojection matrix mapping homogeneous `(u, v, δ, 1)` to a homogeneous
    /// left-camera point. The last row is `[0, 0, 1/tx, -(cx1 - cx2)/tx]`, which
    /// agrees with [`RectifiedRig::disparity_to_depth`].
    pub fn q(&self) -> Matrix4<f64> {
        Matrix4::new(
            1.0, 0.0, 0.0, -self.cx1, //
            0.0, 1.0, 0.0, -self.cy1, //
            0.0, 0.0, 0.0, self.f, //
            0.0, 0.0, 1.0 / self.tx, -(self.cx1 - self.cx2) / self.tx,
        )
    }

    pub fn matrices(&self) -> (Matrix3x4<f64>, Matrix3x4<f64>, Matrix4<f64>) {
        (self.p1(), self.p2(), self.q())
    }

    pub fn disparity_to_depth(&self, disparity: f64) -> Result<f64, RigError> {
        let denom = disparity - (self.cx1 - self.cx2);
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(RigError::BehindCamera(denom));
        }
        Ok(self.tx * self.f / denom)
    }

    pub fn depth_to_disparity(&self, depth: f64) -> Result<f64, RigError> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(RigError::NonPositiveDepth(depth));
        }
        Ok(self.tx * self.f / depth + (self.cx1 - self.cx2))
    }

    pub fn triangulate_pixel(&self, u: f64, v: f64, disparity: f64) -> Result<Point3<f64>, RigError> {
        let z = self.disparity_to_depth(disparity)?;
        Ok(Point3::new((u - self.cx1) * z / self.f, (v - self.cy1) * z / self.f, z))
    }

    /// Same as [`RectifiedRig::triangulate_pixel`] but through the `Q` matrix.
    pub fn reproject_with_q(&self, u: f64, v: f64, disparity: f64) -> Result<Point3<f64>, RigError> {
        let h = self.q() * Vector4::new(u, v, disparity, 1.0);
        if !(h.w > 0.0) {
            return Err(RigError::BehindCamera(h.w * self.tx));
        }
        Ok(Point3::new(h.x / h.w, h.y / h.w, h.z / h.w))
    }

    /// Pinhole projection of a left-camera-frame point into one eye.
    pub fn project_point(&self, eye: Eye, p: &Point3<f64>) -> Result<(f64, f64), RigError> {
        if !(p.z > 0.0) {
            return Err(RigError::NonPositiveDepth(p.z));
        }
        let (cx, cy) = self.principal_point(eye);
        let x = p.x - self.eye_offset(eye);
        Ok((self.f * x / p.z + cx, self.f * p.y / p.z + cy))
    }

    /// Column in the other eye matching column `u` of `eye` at disparity `δ`.
    pub fn partner_column(&self, eye: Eye, u: f64, disparity: f64) -> f64 {
        match eye {
            Eye::Left => u - disparity,
            Eye::Right => u + disparity,
        }
    }

    /// Triangulate matched chessboard corners `(u, v)` from the two images.
    pub fn triangulate_chessboard(
        &self,
        left: &[(f64, f64)],
        right: &[(f64, f64)],
    ) -> Result<Vec<Point3<f64>>, RigError> {
        if left.len() != right.len() {
            return Err(RigError::LengthMismatch(left.len(), right.len()));
        }
        left.iter()
            .zip(right)
            .enumerate()
            .map(|(index, (&(ul, vl), &(ur, vr)))| {
                let dv = (vl - vr).abs();
                if dv > CHESSBOARD_ROW_TOLERANCE {
                    return Err(RigError::RectificationViolation { index, dv });
                }
                self.triangulate_pixel(ul, vl, ul - ur)
            })
            .collect()
    }
}
