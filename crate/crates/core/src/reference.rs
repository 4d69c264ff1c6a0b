//! Reference bundle generation: per-eye depth maps, left-to-right disparity,
//! a combined occlusion mask, range statistics and the resampling check image.

use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ColorImage, DimensionMismatch};
use crate::mesh::TriangleMesh;
use crate::render::{rasterize_depth, DepthBuffer, RenderConfig, RenderError};
use crate::rig::{Eye, RectifiedRig};
use crate::se3::RigidTransform;

/// Default depth disagreement (mm) above which a pixel counts as occluded.
pub const DEFAULT_MARGIN: f64 = 1.0;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ReferenceError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Dimension(#[from] DimensionMismatch),
    #[error("occlusion margin must be positive, got {0}")]
    InvalidMargin(f64),
    #[error("no valid pixels to summarise")]
    NoValidPixels,
}

/// Row-major per-pixel scalar raster with NaN marking invalid pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl ScalarMap {
    pub fn invalid(width: u32, height: u32) -> Self {
        Self { width, height, values: vec![f64::NAN; width as usize * height as usize] }
    }

    pub fn constant(width: u32, height: u32, value: f64) -> Self {
        Self { width, height, values: vec![value; width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f64) -> Self {
        let mut values = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self { width, height, values }
    }

    /// `None` when `values.len() != width * height`.
    pub fn from_values(width: u32, height: u32, values: Vec<f64>) -> Option<Self> {
        (values.len() == width as usize * height as usize).then_some(Self { width, height, values })
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, x: u32, y: u32) -> Option<f64> {
        let v = self.values[y as usize * self.width as usize + x as usize];
        v.is_finite().then_some(v)
    }

    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        self.values[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite()).count()
    }

    pub fn check_size(&self, width: u32, height: u32) -> Result<(), DimensionMismatch> {
        if (self.width, self.height) == (width, height) {
            Ok(())
        } else {
            Err(DimensionMismatch { expected_w: width, expected_h: height, actual_w: self.width, actual_h: self.height })
        }
    }
}

macro_rules! scalar_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name(ScalarMap);

        impl $name {
            pub fn new(map: ScalarMap) -> Self {
                Self(map)
            }
            pub fn into_inner(self) -> ScalarMap {
                self.0
            }
            pub fn as_map(&self) -> &ScalarMap {
                &self.0
            }
            pub fn map_mut(&mut self) -> &mut ScalarMap {
                &mut self.0
            }
        }

        impl Deref for $name {
            type Target = ScalarMap;
            fn deref(&self) -> &ScalarMap {
                &self.0
            }
        }
    };
}

scalar_newtype!(
    /// Metric Z per pixel (mm).
    DepthMap
);
scalar_newtype!(
    /// Left-to-right disparity per pixel (px).
    DisparityMap
);

impl DepthMap {
    /// Metric depth from a rendered depth buffer; back-plane pixels are invalid.
    pub fn from_buffer(buf: &DepthBuffer) -> Self {
        let values = (0..buf.height())
            .flat_map(|y| (0..buf.width()).map(move |x| (x, y)))
            .map(|(x, y)| buf.depth_at(x, y).unwrap_or(f64::NAN))
            .collect();
        Self(ScalarMap { width: buf.width(), height: buf.height(), values })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLabel {
    Valid,
    /// Seen by the left camera but hidden from the right one.
    OccludedLeft,
    /// The right-image pixel at this coordinate is hidden from the left camera.
    OccludedRight,
    /// Disparity points outside the right image.
    NonOverlap,
    /// No model surface behind the left pixel.
    OutsideModel,
}

impl MaskLabel {
    pub const ALL: [MaskLabel; 5] =
        [MaskLabel::Valid, MaskLabel::OccludedLeft, MaskLabel::OccludedRight, MaskLabel::NonOverlap, MaskLabel::OutsideModel];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }

    /// Display colour: black, green, red, yellow, blue.
    pub fn color(self) -> [u8; 3] {
        match self {
            MaskLabel::Valid => [0, 0, 0],
            MaskLabel::OccludedLeft => [0, 255, 0],
            MaskLabel::OccludedRight => [255, 0, 0],
            MaskLabel::NonOverlap => [255, 255, 0],
            MaskLabel::OutsideModel => [0, 0, 255],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskLabel::Valid => "valid",
            MaskLabel::OccludedLeft => "occluded_left",
            MaskLabel::OccludedRight => "occluded_right",
            MaskLabel::NonOverlap => "non_overlap",
            MaskLabel::OutsideModel => "outside_model",
        }
    }

    /// Whether the left pixel has a trustworthy reference disparity, with or
    /// without left occlusions counted in.
    pub fn is_eligible(self, include_occluded: bool) -> bool {
        match self {
            MaskLabel::Valid | MaskLabel::OccludedRight => true,
            MaskLabel::OccludedLeft => include_occluded,
            MaskLabel::NonOverlap | MaskLabel::OutsideModel => false,
        }
    }
}

/// One label per left-image pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMap {
    width: u32,
    height: u32,
    labels: Vec<MaskLabel>,
}

impl MaskMap {
    pub fn filled(width: u32, height: u32, label: MaskLabel) -> Self {
        Self { width, height, labels: vec![label; width as usize * height as usize] }
    }

    pub fn from_labels(width: u32, height: u32, labels: Vec<MaskLabel>) -> Option<Self> {
        (labels.len() == width as usize * height as usize).then_some(Self { width, height, labels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn labels(&self) -> &[MaskLabel] {
        &self.labels
    }

    pub fn get(&self, x: u32, y: u32) -> MaskLabel {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, label: MaskLabel) {
        self.labels[y as usize * self.width as usize + x as usize] = label;
    }

    pub fn count(&self, label: MaskLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Percentage of all pixels carrying `label`.
    pub fn percent(&self, label: MaskLabel) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        100.0 * self.count(label) as f64 / self.labels.len() as f64
    }

    pub fn to_image(&self) -> ColorImage {
        ColorImage::from_fn(self.width, self.height, |x, y| self.get(x, y).color())
    }

    pub fn check_size(&self, width: u32, height: u32) -> Result<(), DimensionMismatch> {
        if (self.width, self.height) == (width, height) {
            Ok(())
        } else {
            Err(DimensionMismatch { expected_w: width, expected_h: height, actual_w: self.width, actual_h: self.height })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub render: RenderConfig,
    /// Occlusion depth margin, mm.
    pub margin: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { render: RenderConfig::default(), margin: DEFAULT_MARGIN }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBundle {
    pub depth_left: DepthMap,
    pub depth_right: DepthMap,
    pub disparity: DisparityMap,
    pub mask: MaskMap,
}

/// Render both eyes and derive disparity and mask.
pub fn generate_reference(
    mesh: &TriangleMesh,
    rig: &RectifiedRig,
    pose: &RigidTransform,
    config: &ReferenceConfig,
) -> Result<ReferenceBundle, ReferenceError> {
    if !(config.margin > 0.0) {
        return Err(ReferenceError::InvalidMargin(config.margin));
    }
    let depth_left = DepthMap::from_buffer(&rasterize_depth(mesh, rig, Eye::Left, pose, &config.render)?);
    let depth_right = DepthMap::from_buffer(&rasterize_depth(mesh, rig, Eye::Right, pose, &config.render)?);
    let disparity = depthmap_to_disparity(rig, &depth_left);
    let mask = compute_occlusions(rig, &depth_left, &depth_right, &disparity, config.margin)?;
    Ok(ReferenceBundle { depth_left, depth_right, disparity, mask })
}

/// Per-pixel disparity of a left depth map; invalid stays invalid.
pub fn depthmap_to_disparity(rig: &RectifiedRig, depth: &DepthMap) -> DisparityMap {
    let values = depth.values().iter().map(|&z| rig.depth_to_disparity(z).unwrap_or(f64::NAN)).collect();
    DisparityMap(ScalarMap { width: depth.width(), height: depth.height(), values })
}

/// Nearest pixel column holding continuous coordinate `u`, if inside.
fn column_of(u: f64, width: u32) -> Option<u32> {
    (u >= 0.0 && u < width as f64).then(|| u.floor() as u32)
}

/// Whether pixel `(x, y)` of `eye` with depth `z` is hidden from the other eye.
fn hidden_from_other(
    rig: &RectifiedRig,
    eye: Eye,
    other_depth: &DepthMap,
    x: u32,
    y: u32,
    z: f64,
    disparity: f64,
    margin: f64,
) -> Option<bool> {
    let u = rig.partner_column(eye, x as f64 + 0.5, disparity);
    let col = column_of(u, rig.width())?;
    let seen = other_depth.get(col, y).is_some_and(|z_other| (z - z_other).abs() <= margin);
    Some(!seen)
}

/// Combined left-frame mask.
///
/// Left pixels are checked against the right depth at their disparity
/// partner (nearest pixel); right pixels likewise against the left depth.
/// Labels take precedence in the order outside_model, non_overlap,
/// occluded_left, occluded_right, valid.
pub fn compute_occlusions(
    rig: &RectifiedRig,
    depth_left: &DepthMap,
    depth_right: &DepthMap,
    disparity: &DisparityMap,
    margin: f64,
) -> Result<MaskMap, ReferenceError> {
    if !(margin > 0.0) {
        return Err(ReferenceError::InvalidMargin(margin));
    }
    let (w, h) = (rig.width(), rig.height());
    depth_left.check_size(w, h)?;
    depth_right.check_size(w, h)?;
    disparity.check_size(w, h)?;
    let mut mask = MaskMap::filled(w, h, MaskLabel::Valid);
    for y in 0..h {
        for x in 0..w {
            let label = match (depth_left.get(x, y), disparity.get(x, y)) {
                (Some(z), Some(d)) => match hidden_from_other(rig, Eye::Left, depth_right, x, y, z, d, margin) {
                    None => MaskLabel::NonOverlap,
                    Some(true) => MaskLabel::OccludedLeft,
                    Some(false) => {
                        let right_hidden = depth_right.get(x, y).and_then(|zr| {
                            let dr = rig.depth_to_disparity(zr).ok()?;
                            hidden_from_other(rig, Eye::Right, depth_left, x, y, zr, dr, margin)
                        });
                        if right_hidden == Some(true) {
                            MaskLabel::OccludedRight
                        } else {
                            MaskLabel::Valid
                        }
                    }
                },
                _ => MaskLabel::OutsideModel,
            };
            mask.set(x, y, label);
        }
    }
    Ok(mask)
}

/// Per-eye occlusion flags: `true` where a pixel of `eye` has valid depth and
/// its partner in the other eye is out of view or disagrees beyond `margin`.
pub fn occlusion_flags(
    rig: &RectifiedRig,
    eye: Eye,
    depth: &DepthMap,
    other_depth: &DepthMap,
    margin: f64,
) -> Vec<bool> {
    let mut out = Vec::with_capacity(depth.values().len());
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let flag = depth.get(x, y).and_then(|z| {
                let d = rig.depth_to_disparity(z).ok()?;
                hidden_from_other(rig, eye, other_depth, x, y, z, d, margin)
            });
            out.push(flag == Some(true));
        }
    }
    out
}

/// Right image warped into the left view by `disparity`, and the amplified
/// absolute difference to the left image. Pixels without a valid disparity
/// or whose partner falls outside the right image are black in both.
pub fn resample_and_diff(
    right: &ColorImage,
    left: &ColorImage,
    disparity: &DisparityMap,
    gain: f64,
) -> Result<(ColorImage, ColorImage), ReferenceError> {
    let (w, h) = (left.width(), left.height());
    right.check_size(w, h)?;
    disparity.check_size(w, h)?;
    let mut resampled = ColorImage::new(w, h);
    let mut diff = ColorImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let Some(d) = disparity.get(x, y) else { continue };
            let Some(s) = right.sample_bilinear(x as f64 - d, y as f64) else { continue };
            let l = left.get(x, y);
            let r = s.map(|c| c.round().clamp(0.0, 255.0) as u8);
            resampled.set(x, y, r);
            let dv = [0, 1, 2].map(|c| (gain * (l[c] as f64 - s[c]).abs()).round().clamp(0.0, 255.0) as u8);
            diff.set(x, y, dv);
        }
    }
    Ok((resampled, diff))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub p01: f64,
    pub p99: f64,
    pub count: usize,
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 100].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Statistics over valid pixels, restricted to mask label `valid` when a mask
/// is given.
pub fn range_stats(map: &ScalarMap, mask: Option<&MaskMap>) -> Result<RangeStats, ReferenceError> {
    if let Some(m) = mask {
        m.check_size(map.width(), map.height())?;
    }
    let mut vals: Vec<f64> = map
        .values()
        .iter()
        .enumerate()
        .filter(|(i, v)| v.is_finite() && mask.is_none_or(|m| m.labels()[*i] == MaskLabel::Valid))
        .map(|(_, v)| *v)
        .collect();
    if vals.is_empty() {
        return Err(ReferenceError::NoValidPixels);
    }
    vals.sort_by(f64::total_cmp);
    Ok(RangeStats {
        min: vals[0],
        max: vals[vals.len() - 1],
        mean: vals.iter().sum::<f64>() / vals.len() as f64,
        p01: percentile(&vals, 1.0),
        p99: percentile(&vals, 99.0),
        count: vals.len(),
    })
}
