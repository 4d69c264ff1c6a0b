//! Rigid transforms from model (CT) coordinates to the left camera, their
//! averaging, point-set registration and the constrained pose edits used
//! during manual alignment.

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, SymmetricEigen, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality / determinant tolerance for a valid rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Default bound on the axial camera translation, in mm.
pub const DEFAULT_DZ_BOUND: f64 = 20.0;

/// Two leading eigenvalues closer than this (relative to their sum) mark the
/// rotation mean as ambiguous.
const EIGEN_GAP_TOLERANCE: f64 = 1e-9;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Se3Error {
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("cannot average an empty set")]
    Empty,
    #[error("no inlier transforms to average")]
    NoInliers,
    #[error("inlier flags ({flags}) do not match transforms ({transforms})")]
    FlagMismatch { flags: usize, transforms: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("axial translation {requested} mm exceeds bound of {bound} mm")]
    AxialBound { requested: f64, bound: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

/// Rotation plus translation taking model points into the left-camera frame:
/// `p_cam = R * p_model + T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, Se3Error> {
        check_rotation(&rotation)?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Se3Error::NonFinite("translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: rotation.into_inner(), translation }
    }

    /// Parse a 4×4 homogeneous matrix; the last row must be `[0, 0, 0, 1]`.
    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self, Se3Error> {
        let last = m.row(3);
        if (last - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).amax() > ROTATION_TOLERANCE {
            return Err(Se3Error::NotARotation(format!("last row is {last}")));
        }
        Self::new(m.fixed_view::<3, 3>(0, 0).into_owned(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Camera optical centre expressed in model coordinates.
    pub fn camera_center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Camera viewing direction (+Z) expressed in model coordinates.
    pub fn view_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// Largest absolute element difference of the homogeneous matrices.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.to_homogeneous() - other.to_homogeneous()).amax()
    }

    /// Rotation angle between two transforms, radians.
    pub fn angle_to(&self, other: &RigidTransform) -> f64 {
        geodesic_distance(&self.rotation, &other.rotation)
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), Se3Error> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Se3Error::NonFinite("rotation".into()));
    }
    let orth = (r.transpose() * r - Matrix3::identity()).amax();
    if orth > ROTATION_TOLERANCE {
        return Err(Se3Error::NotARotation(format!("|RᵀR - I| = {orth:e}")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(Se3Error::NotARotation(format!("det = {det}")));
    }
    Ok(())
}

/// Angle of `Aᵀ B`, radians.
pub fn geodesic_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMean {
    pub rotation: Matrix3<f64>,
    /// Set when the leading eigenvalue is repeated and the mean is not unique.
    pub ambiguous: bool,
}

/// Quaternion eigen-mean of a set of rotations.
///
/// Each rotation contributes `q qᵀ` to a 4×4 accumulator, which makes the
/// result independent of the sign of each quaternion. The mean is the unit
/// eigenvector of the largest eigenvalue.
pub fn average_rotations(rotations: &[Matrix3<f64>]) -> Result<RotationMean, Se3Error> {
    if rotations.is_empty() {
        return Err(Se3Error::Empty);
    }
    let mut acc = Matrix4::<f64>::zeros();
    for r in rotations {
        check_rotation(r)?;
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
        let v = Vector4::new(q.w, q.i, q.j, q.k);
        acc += v * v.transpose();
    }
    let eig = SymmetricEigen::new(acc);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (top, second) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    let ambiguous = top - second <= EIGEN_GAP_TOLERANCE * (top + second).max(1.0);
    let v = eig.eigenvectors.column(order[0]);
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));
    Ok(RotationMean { rotation: q.to_rotation_matrix().into_inner(), ambiguous })
}

/// Repeated alignments of one view with their shared centre of rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSet {
    pub transforms: Vec<RigidTransform>,
    /// Centre of rotation in model coordinates, mm.
    pub c_ct: Point3<f64>,
    pub inliers: Vec<bool>,
}

impl AlignmentSet {
    /// All transforms marked as inliers.
    pub fn new(transforms: Vec<RigidTransform>, c_ct: Point3<f64>) -> Result<Self, Se3Error> {
        let inliers = vec![true; transforms.len()];
        Self::with_inliers(transforms, c_ct, inliers)
    }

    pub fn with_inliers(transforms: Vec<RigidTransform>, c_ct: Point3<f64>, inliers: Vec<bool>) -> Result<Self, Se3Error> {
        if transforms.is_empty() {
            return Err(Se3Error::Empty);
        }
        if inliers.len() != transforms.len() {
            return Err(Se3Error::FlagMismatch { flags: inliers.len(), transforms: transforms.len() });
        }
        if c_ct.iter().any(|v| !v.is_finite()) {
            return Err(Se3Error::NonFinite("centre of rotation".into()));
        }
        Ok(Self { transforms, c_ct, inliers })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformMean {
    pub transform: RigidTransform,
    pub ambiguous: bool,
    pub inliers_used: usize,
}

/// Mean rigid transform of the inliers of `set`.
///
/// The rotation is the quaternion eigen-mean. The translation is chosen so
/// that the mean transform maps `c_ct` onto the mean of the individually
/// transformed `c_ct` (rather than averaging the raw translations, which
/// would average the motion of the model origin).
pub fn average_transforms(set: &AlignmentSet) -> Result<TransformMean, Se3Error> {
    let inliers: Vec<&RigidTransform> =
        set.transforms.iter().zip(&set.inliers).filter(|(_, &keep)| keep).map(|(t, _)| t).collect();
    if inliers.is_empty() {
        return Err(Se3Error::NoInliers);
    }
    let rotations: Vec<Matrix3<f64>> = inliers.iter().map(|t| t.rotation).collect();
    let mean = average_rotations(&rotations)?;
    let n = inliers.len() as f64;
    let y_mean = inliers.iter().fold(Vector3::zeros(), |acc, t| acc + t.apply(&set.c_ct).coords) / n;
    let translation = y_mean - mean.rotation * set.c_ct.coords;
    Ok(TransformMean {
        transform: RigidTransform { rotation: mean.rotation, translation },
        ambiguous: mean.ambiguous,
        inliers_used: inliers.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Registration {
    pub transform: RigidTransform,
    pub scale: f64,
    /// Root-mean-square residual after alignment, mm.
    pub fre_rms: f64,
}

impl Registration {
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.transform.rotation * p.coords) + self.transform.translation)
    }
}

/// Least-squares rigid (or similarity) alignment of corresponding points,
/// minimising `Σ |dst - s R src - T|²` (Umeyama's closed form).
pub fn register_points(src: &[Point3<f64>], dst: &[Point3<f64>], with_scale: bool) -> Result<Registration, Se3Error> {
    if src.len() != dst.len() {
        return Err(Se3Error::Degenerate(format!("{} source vs {} target points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Se3Error::Degenerate(format!("need at least 3 correspondences, got {}", src.len())));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mu_d = dst.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;

    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (s.coords - mu_s, d.coords - mu_d);
        cov += cd * cs.transpose();
        src_cov += cs * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= n;
    var_s /= n;

    let spread = SymmetricEigen::new(src_cov / n).eigenvalues;
    let mut sorted = [spread[0], spread[1], spread[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sorted[0] > 0.0) || sorted[1] <= 1e-12 * sorted[0] {
        return Err(Se3Error::Degenerate("source points are collinear or coincident".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        let d = svd.singular_values;
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_s
    } else {
        1.0
    };
    let translation = mu_d - scale * rotation * mu_s;
    let transform = RigidTransform { rotation, translation };
    let reg = Registration { transform, scale, fre_rms: 0.0 };
    let sq: f64 = src.iter().zip(dst).map(|(s, d)| (reg.apply(s) - d).norm_squared()).sum();
    Ok(Registration { fre_rms: (sq / n).sqrt(), ..reg })
}

/// Camera positions and a target point marked on the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerTriple {
    pub left_cam: Point3<f64>,
    pub right_cam: Point3<f64>,
    pub target: Point3<f64>,
}

impl MarkerTriple {
    pub fn new(left_cam: Point3<f64>, right_cam: Point3<f64>, target: Point3<f64>) -> Result<Self, Se3Error> {
        let m = Self { left_cam, right_cam, target };
        m.frame()?;
        Ok(m)
    }

    /// Orthonormal camera axes (x, y, z) in model coordinates.
    fn frame(&self) -> Result<(Vector3<f64>, Vector3<f64>, Vector3<f64>), Se3Error> {
        let pts = [self.left_cam, self.right_cam, self.target];
        if pts.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Se3Error::NonFinite("marker".into()));
        }
        let baseline = self.right_cam - self.left_cam;
        let view = self.target - self.left_cam;
        if baseline.norm() == 0.0 {
            return Err(Se3Error::Degenerate("left and right camera markers coincide".into()));
        }
        if view.norm() == 0.0 {
            return Err(Se3Error::Degenerate("target coincides with the left camera".into()));
        }
        let z = view.normalize();
        let sin = baseline.normalize().cross(&z).norm();
        if sin < 1e-6 {
            return Err(Se3Error::Degenerate("target is collinear with the camera markers".into()));
        }
        let x = (baseline - z * baseline.dot(&z)).normalize();
        let y = z.cross(&x);
        Ok((x, y, z))
    }
}

/// Initial model→camera transform: origin at the left camera marker, Z
/// towards the target, X towards the right camera (orthogonalised), Y = Z × X.
pub fn initial_pose_from_markers(m: &MarkerTriple) -> Result<RigidTransform, Se3Error> {
    let (x, y, z) = m.frame()?;
    let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let translation = -(rotation * m.left_cam.coords);
    Ok(RigidTransform { rotation, translation })
}

/// Rotation of the camera about its own origin, angles applied in the camera
/// frame about X, then Y, then Z.
pub fn camera_rotation(rx: f64, ry: f64, rz: f64) -> Matrix3<f64> {
    let rot_x = Rotation3::from_axis_angle(&Vector3::x_axis(), rx);
    let rot_y = Rotation3::from_axis_angle(&Vector3::y_axis(), ry);
    let rot_z = Rotation3::from_axis_angle(&Vector3::z_axis(), rz);
    (rot_x * rot_y * rot_z).into_inner()
}

/// Rotate the camera about its optical centre, then slide it `dz` mm along
/// its (new) viewing axis. Positive `dz` moves the camera forward.
///
/// The camera centre in model coordinates only ever moves along the viewing
/// axis, so the position marked on the endoscope is preserved up to the
/// axial pinhole offset.
pub fn constrained_adjust(
    pose: &RigidTransform,
    rx: f64,
    ry: f64,
    rz: f64,
    dz: f64,
    dz_bound: f64,
) -> Result<RigidTransform, Se3Error> {
    if [rx, ry, rz, dz].iter().any(|v| !v.is_finite()) {
        return Err(Se3Error::NonFinite("adjustment".into()));
    }
    if dz.abs() > dz_bound {
        return Err(Se3Error::AxialBound { requested: dz, bound: dz_bound });
    }
    let delta_t = camera_rotation(rx, ry, rz).transpose();
    Ok(RigidTransform {
        rotation: delta_t * pose.rotation,
        translation: delta_t * pose.translation - Vector3::new(0.0, 0.0, dz),
    })
}
