//! Disparity and depth error metrics, alignment outlier rejection, report
//! aggregation and signed error images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ColorImage, DimensionMismatch};
use crate::reference::{DisparityMap, MaskMap};
use crate::rig::RectifiedRig;

pub const DEFAULT_BAD_THRESHOLD: f64 = 3.0;
pub const DEFAULT_CLIP: f64 = 10.0;
pub const DEFAULT_OUTLIER_PERCENT: f64 = 20.0;

/// Colour of pixels without an error value in signed error images.
pub const NEUTRAL_GREY: [u8; 3] = [128, 128, 128];

/// Stops of the diverging colormap at normalised error `t = err / clip`;
/// piecewise linear in between.
pub const COLORMAP_STOPS: [(f64, [f64; 3]); 5] = [
    (-1.0, [0.6, 1.0, 1.0]),
    (-0.5, [0.0, 0.0, 1.0]),
    (0.0, [0.1, 0.1, 0.1]),
    (0.5, [1.0, 0.0, 0.0]),
    (1.0, [1.0, 1.0, 0.6]),
];

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Dimension(#[from] DimensionMismatch),
    #[error("no eligible pixels")]
    NoEligiblePixels,
    #[error("no probe disparity maps given")]
    NoProbes,
    #[error("{candidates} candidates but {masks} masks")]
    MaskCount { candidates: usize, masks: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot aggregate an empty score list")]
    EmptyScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DepthMetric {
    /// Difference of Z only.
    #[default]
    Z,
    /// Full 3D distance between the triangulated points.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub bad_threshold: f64,
    pub include_occluded: bool,
    pub clip: f64,
    pub depth_metric: DepthMetric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { bad_threshold: DEFAULT_BAD_THRESHOLD, include_occluded: false, clip: DEFAULT_CLIP, depth_metric: DepthMetric::Z }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.bad_threshold > 0.0) {
            return Err(MetricsError::InvalidConfig(format!("bad threshold {} must be positive", self.bad_threshold)));
        }
        if !(self.clip > 0.0) {
            return Err(MetricsError::InvalidConfig(format!("clip {} must be positive", self.clip)));
        }
        Ok(())
    }

    pub fn with_occluded(self, include_occluded: bool) -> Self {
        Self { include_occluded, ..self }
    }
}

fn check(est: &DisparityMap, reference: &DisparityMap, mask: &MaskMap) -> Result<(), MetricsError> {
    est.check_size(reference.width(), reference.height())?;
    mask.check_size(reference.width(), reference.height())?;
    Ok(())
}

/// Indices of pixels that carry a reference value and an eligible label.
fn eligible<'a>(reference: &'a DisparityMap, mask: &'a MaskMap, include_occluded: bool) -> impl Iterator<Item = usize> + 'a {
    reference
        .values()
        .iter()
        .zip(mask.labels())
        .enumerate()
        .filter(move |(_, (r, l))| r.is_finite() && l.is_eligible(include_occluded))
        .map(|(i, _)| i)
}

/// Root-mean-square error with the pixel counts behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    /// NaN when no eligible pixel has a usable estimate.
    pub value: f64,
    /// Pixels contributing to the RMS.
    pub used: usize,
    /// Eligible pixels, including those skipped for lack of an estimate.
    pub eligible: usize,
}

impl Rmse {
    fn from_sum(sum_sq: f64, used: usize, eligible: usize) -> Self {
        let value = if used == 0 { f64::NAN } else { (sum_sq / used as f64).sqrt() };
        Self { value, used, eligible }
    }

    /// Fraction of eligible pixels with a usable estimate, in percent.
    pub fn coverage_percent(&self) -> f64 {
        100.0 * self.used as f64 / self.eligible as f64
    }
}

/// Percentage of eligible pixels whose absolute error exceeds the threshold.
/// Pixels without an estimate count as bad.
pub fn bad_pixel_percent(est: &DisparityMap, reference: &DisparityMap, mask: &MaskMap, cfg: &EvalConfig) -> Result<f64, MetricsError> {
    check(est, reference, mask)?;
    cfg.validate()?;
    let (mut n, mut bad) = (0usize, 0usize);
    for i in eligible(reference, mask, cfg.include_occluded) {
        n += 1;
        let e = est.values()[i];
        if !e.is_finite() || (e - reference.values()[i]).abs() > cfg.bad_threshold {
            bad += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoEligiblePixels);
    }
    Ok(100.0 * bad as f64 / n as f64)
}

pub fn rmse_disparity(est: &DisparityMap, reference: &DisparityMap, mask: &MaskMap, cfg: &EvalConfig) -> Result<Rmse, MetricsError> {
    check(est, reference, mask)?;
    let (mut n, mut used, mut sum) = (0usize, 0usize, 0.0);
    for i in eligible(reference, mask, cfg.include_occluded) {
        n += 1;
        let e = est.values()[i];
        if e.is_finite() {
            used += 1;
            sum += (e - reference.values()[i]).powi(2);
        }
    }
    if n == 0 {
        return Err(MetricsError::NoEligiblePixels);
    }
    Ok(Rmse::from_sum(sum, used, n))
}

/// RMS depth error after converting both disparities through the rig.
/// Estimates that do not triangulate in front of the camera are skipped.
pub fn rmse_depth(
    rig: &RectifiedRig,
    est: &DisparityMap,
    reference: &DisparityMap,
    mask: &MaskMap,
    cfg: &EvalConfig,
) -> Result<Rmse, MetricsError> {
    check(est, reference, mask)?;
    let w = reference.width() as usize;
    let (mut n, mut used, mut sum) = (0usize, 0usize, 0.0);
    for i in eligible(reference, mask, cfg.include_occluded) {
        n += 1;
        let (u, v) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        let err = match cfg.depth_metric {
            DepthMetric::Z => rig
                .disparity_to_depth(est.values()[i])
                .and_then(|ze| Ok(ze - rig.disparity_to_depth(reference.values()[i])?)),
            DepthMetric::Euclidean => rig
                .triangulate_pixel(u, v, est.values()[i])
                .and_then(|pe| Ok((pe - rig.triangulate_pixel(u, v, reference.values()[i])?).norm())),
        };
        if let Ok(err) = err {
            used += 1;
            sum += err * err;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoEligiblePixels);
    }
    Ok(Rmse::from_sum(sum, used, n))
}

/// Colormap lookup for normalised error `t`, clamped to [-1, 1].
pub fn diverging_color(t: f64) -> [u8; 3] {
    let t = t.clamp(-1.0, 1.0);
    let k = COLORMAP_STOPS.windows(2).position(|w| t <= w[1].0).unwrap_or(COLORMAP_STOPS.len() - 2);
    let ((t0, c0), (t1, c1)) = (COLORMAP_STOPS[k], COLORMAP_STOPS[k + 1]);
    let s = (t - t0) / (t1 - t0);
    [0, 1, 2].map(|c| ((c0[c] * (1.0 - s) + c1[c] * s) * 255.0).round() as u8)
}

/// `est - ref` rendered through [`diverging_color`] with `cfg.clip`.
pub fn signed_error_image(est: &DisparityMap, reference: &DisparityMap, mask: &MaskMap, cfg: &EvalConfig) -> Result<ColorImage, MetricsError> {
    check(est, reference, mask)?;
    cfg.validate()?;
    Ok(ColorImage::from_fn(reference.width(), reference.height(), |x, y| {
        match (est.get(x, y), reference.get(x, y)) {
            (Some(e), Some(r)) if mask.get(x, y).is_eligible(cfg.include_occluded) => diverging_color((e - r) / cfg.clip),
            _ => NEUTRAL_GREY,
        }
    }))
}

/// Inlier flag per candidate reference. A candidate is an outlier when every
/// probe disagrees with it on more than `tau_percent` of its valid pixels
/// (bad-pixel threshold from `cfg`).
pub fn reject_outlier_alignments(
    candidates: &[DisparityMap],
    probes: &[DisparityMap],
    masks: &[MaskMap],
    tau_percent: f64,
    cfg: &EvalConfig,
) -> Result<Vec<bool>, MetricsError> {
    if probes.is_empty() {
        return Err(MetricsError::NoProbes);
    }
    if candidates.len() != masks.len() {
        return Err(MetricsError::MaskCount { candidates: candidates.len(), masks: masks.len() });
    }
    if !(tau_percent > 0.0 && tau_percent <= 100.0) {
        return Err(MetricsError::InvalidConfig(format!("outlier threshold {tau_percent}% outside (0, 100]")));
    }
    let cfg = cfg.with_occluded(false);
    candidates
        .iter()
        .zip(masks)
        .map(|(cand, mask)| {
            let mut all_bad = true;
            for probe in probes {
                all_bad &= bad_pixel_percent(probe, cand, mask, &cfg)? > tau_percent;
            }
            Ok(!all_bad)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub bad_percent: f64,
    pub rmse_disparity: f64,
    pub rmse_depth: f64,
    pub eligible_pixels: usize,
    /// Eligible pixels carrying an estimate.
    pub valid_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub excluded: VariantScore,
    pub included: VariantScore,
}

impl ImageScore {
    pub fn variant(&self, include_occluded: bool) -> &VariantScore {
        if include_occluded {
            &self.included
        } else {
            &self.excluded
        }
    }
}

/// Score one estimate in both occlusion variants.
pub fn score_image(
    id: &str,
    rig: &RectifiedRig,
    est: &DisparityMap,
    reference: &DisparityMap,
    mask: &MaskMap,
    cfg: &EvalConfig,
) -> Result<ImageScore, MetricsError> {
    let variant = |include| -> Result<VariantScore, MetricsError> {
        let c = cfg.with_occluded(include);
        let disp = rmse_disparity(est, reference, mask, &c)?;
        Ok(VariantScore {
            bad_percent: bad_pixel_percent(est, reference, mask, &c)?,
            rmse_disparity: disp.value,
            rmse_depth: rmse_depth(rig, est, reference, mask, &c)?.value,
            eligible_pixels: disp.eligible,
            valid_pixels: disp.used,
        })
    };
    Ok(ImageScore { id: id.to_string(), excluded: variant(false)?, included: variant(true)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantAggregate {
    pub bad_percent: MeanStd,
    pub rmse_disparity: MeanStd,
    pub rmse_depth: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Vec<ImageScore>,
    pub excluded: VariantAggregate,
    pub included: VariantAggregate,
}

impl EvalReport {
    pub fn variant(&self, include_occluded: bool) -> &VariantAggregate {
        if include_occluded {
            &self.included
        } else {
            &self.excluded
        }
    }
}

/// Per-image mean and population standard deviation, images weighted equally.
pub fn aggregate(scores: Vec<ImageScore>) -> Result<EvalReport, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    let agg = |include: bool| {
        let pick = |f: fn(&VariantScore) -> f64| MeanStd::of(&scores.iter().map(|s| f(s.variant(include))).collect::<Vec<_>>());
        VariantAggregate {
            bad_percent: pick(|v| v.bad_percent),
            rmse_disparity: pick(|v| v.rmse_disparity),
            rmse_depth: pick(|v| v.rmse_depth),
        }
    };
    let (excluded, included) = (agg(false), agg(true));
    Ok(EvalReport { scores, excluded, included })
}
