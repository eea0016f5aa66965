//! Pose algebra, pinhole projection and two-view triangulation.
//!
//! Poses are stored camera-to-world: `rotation` maps camera axes into the
//! world frame and `center` is the camera position. World-to-camera
//! quantities are derived on demand.

use nalgebra::{Matrix3, Matrix4, Rotation3, SymmetricEigen, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depth below which a point is considered to lie on or behind the image plane.
pub const MIN_DEPTH: f64 = 1e-9;

/// Maximum reprojection error accepted by [`triangulate_pair`], in pixels.
pub const TRIANGULATION_MAX_REPROJ_PX: f64 = 4.0;

/// Camera centers closer than this are treated as a zero baseline.
pub const MIN_TRIANGULATION_BASELINE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0} in the camera frame")]
    NonPositiveDepth(f64),
    #[error("camera centers coincide; baseline {0} m")]
    DegenerateBaseline(f64),
    #[error("triangulated point lies behind at least one camera")]
    CheiralityFailure,
    #[error("triangulated point reprojects {0:.3} px away from an observation")]
    ReprojectionRejected(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
}

/// Rigid camera pose, camera-to-world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Self { rotation, center }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            center: Vector3::zeros(),
        }
    }

    /// Builds a pose from a possibly slightly non-orthonormal rotation,
    /// projecting it onto SO(3) first.
    pub fn from_parts_orthonormalized(
        rotation: Matrix3<f64>,
        center: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        Ok(Self {
            rotation: orthonormalize(&rotation)?,
            center,
        })
    }

    /// Camera looking from `center` towards `target`, with the camera `-y`
    /// axis as close as possible to `up`.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - center).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-12 {
            x = z.cross(&Vector3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self {
            rotation: Matrix3::from_columns(&[x, y, z]),
            center,
        }
    }

    /// World-to-camera rotation.
    pub fn rotation_wc(&self) -> Matrix3<f64> {
        self.rotation.transpose()
    }

    /// World-to-camera translation, `-Rᵀ c`.
    pub fn translation_wc(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.center)
    }

    /// Builds a pose from a world-to-camera rotation and translation.
    pub fn from_world_to_camera(rotation_wc: Matrix3<f64>, translation_wc: Vector3<f64>) -> Self {
        let rotation = rotation_wc.transpose();
        Self {
            rotation,
            center: -(rotation * translation_wc),
        }
    }

    pub fn world_to_camera(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(x_world - self.center))
    }

    pub fn camera_to_world(&self, x_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x_cam + self.center
    }

    /// Inverse rigid transform.
    pub fn invert(&self) -> Self {
        let rotation = self.rotation.transpose();
        Self {
            rotation,
            center: -(rotation * self.center),
        }
    }

    /// `[R | c]` as 12 row-major numbers.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let c = &self.center;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            c[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            c[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            c[2],
        ]
    }

    /// Inverse of [`RigidPose::to_row_major`]; the rotation block is
    /// re-orthonormalized.
    pub fn from_row_major(values: &[f64]) -> Result<Self, GeometryError> {
        if values.len() != 12 {
            return Err(GeometryError::InvalidRotation(format!(
                "expected 12 pose values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidRotation(
                "non-finite pose value".to_string(),
            ));
        }
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8],
            values[9], values[10],
        );
        let center = Vector3::new(values[3], values[7], values[11]);
        Self::from_parts_orthonormalized(rotation, center)
    }

    /// Checks orthonormality and handedness within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        is_rotation(&self.rotation, tol) && self.center.iter().all(|v| v.is_finite())
    }
}

/// Returns true when `r` is orthonormal with determinant +1 within `tol`.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let residual = r.transpose() * r - Matrix3::identity();
    residual.iter().all(|v| v.abs() <= tol) && (r.determinant() - 1.0).abs() <= tol
}

/// Nearest rotation in the Frobenius sense (polar decomposition).
pub fn orthonormalize(m: &Matrix3<f64>) -> Result<Matrix3<f64>, GeometryError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::InvalidRotation(
            "non-finite rotation entry".to_string(),
        ));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => {
            return Err(GeometryError::InvalidRotation(
                "svd did not converge".to_string(),
            ))
        }
    };
    if svd.singular_values.min() < 1e-6 * svd.singular_values.max().max(1e-300) {
        return Err(GeometryError::InvalidRotation(
            "rotation block is singular".to_string(),
        ));
    }
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        return Err(GeometryError::InvalidRotation(
            "rotation block has negative determinant".to_string(),
        ));
    }
    // One Newton step of the polar iteration tightens orthonormality to
    // machine precision.
    if let Some(inv_t) = r.transpose().try_inverse() {
        r = 0.5 * (r + inv_t);
    }
    Ok(r)
}

/// Exponential map from a rotation vector to a rotation matrix.
pub fn exp_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*omega).into_inner()
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidIntrinsics(
                "non-finite parameter".to_string(),
            ));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics(
                "image size must be non-zero".to_string(),
            ));
        }
        if !(0.0..f64::from(self.width)).contains(&self.cx)
            || !(0.0..f64::from(self.height)).contains(&self.cy)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera-frame point to pixel, no depth check.
    pub fn apply(&self, x_cam: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.cx + self.fx * x_cam[0] / x_cam[2],
            self.cy + self.fy * x_cam[1] / x_cam[2],
        )
    }

    /// Pixel to the camera-frame ray with unit z.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel[0] - self.cx) / self.fx,
            (pixel[1] - self.cy) / self.fy,
            1.0,
        )
    }

    /// Whether a continuous pixel coordinate lies on the image; pixel
    /// centers are at integer coordinates so the image spans
    /// `[-0.5, width - 0.5)`.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel[0] >= -0.5
            && pixel[1] >= -0.5
            && pixel[0] < f64::from(self.width) - 0.5
            && pixel[1] < f64::from(self.height) - 0.5
    }
}

/// `x ↦ scale · rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }

    pub fn apply_inverse(&self, y: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(y - self.translation)) / self.scale
    }

    /// Maps a camera-to-world pose expressed in the source frame into the
    /// target frame.
    pub fn apply_pose(&self, pose: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * pose.rotation,
            center: self.apply(&pose.center),
        }
    }

    pub fn apply_inverse_pose(&self, pose: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation.transpose() * pose.rotation,
            center: self.apply_inverse(&pose.center),
        }
    }
}

/// Projects a world point into a camera.
pub fn project(
    pose: &RigidPose,
    k: &Intrinsics,
    x_world: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let xc = pose.world_to_camera(x_world);
    if !(xc[2] > MIN_DEPTH) {
        return Err(GeometryError::NonPositiveDepth(xc[2]));
    }
    Ok(k.apply(&xc))
}

/// Lifts a pixel at the given camera-frame depth into the world.
pub fn backproject(
    pose: &RigidPose,
    k: &Intrinsics,
    pixel: &Vector2<f64>,
    depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let xc = k.unproject(pixel) * depth;
    Ok(pose.camera_to_world(&xc))
}

/// Angle of `ra · rbᵀ` in degrees, in `[0, 180]`.
pub fn rotation_angle(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let rel = ra * rb.transpose();
    let cos = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos loses precision near 0 and 180 degrees; atan2 of the axis norm
    // keeps small angles accurate.
    let axis = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = 0.5 * axis.norm();
    let angle = if cos > 0.5 {
        sin.atan2(cos)
    } else {
        cos.acos()
    };
    angle.to_degrees().clamp(0.0, 180.0)
}

/// Linear two-view triangulation with cheirality and reprojection checks.
pub fn triangulate_pair(
    ua: &Vector2<f64>,
    ub: &Vector2<f64>,
    pa: &RigidPose,
    pb: &RigidPose,
    ka: &Intrinsics,
    kb: &Intrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    let baseline = (pa.center - pb.center).norm();
    if baseline < MIN_TRIANGULATION_BASELINE {
        return Err(GeometryError::DegenerateBaseline(baseline));
    }

    // Work relative to the baseline midpoint for conditioning.
    let origin = 0.5 * (pa.center + pb.center);
    let mut ata = Matrix4::<f64>::zeros();
    for (pixel, pose, k) in [(ua, pa, ka), (ub, pb, kb)] {
        let ray = k.unproject(pixel);
        let r = pose.rotation_wc();
        let t = -(r * (pose.center - origin));
        let row = |i: usize| Vector4::new(r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
        let (p1, p2, p3) = (row(0), row(1), row(2));
        for eq in [p3 * ray[0] - p1, p3 * ray[1] - p2] {
            let eq = eq / eq.norm().max(1e-300);
            ata += eq * eq.transpose();
        }
    }

    let eig = SymmetricEigen::new(ata);
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &v)| {
            if v < best.1 {
                (i, v)
            } else {
                best
            }
        });
    let h = eig.eigenvectors.column(min_idx);
    if h[3].abs() < 1e-12 * h.norm() {
        return Err(GeometryError::CheiralityFailure);
    }
    let x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]) + origin;

    let mut worst = 0.0_f64;
    for (pixel, pose, k) in [(ua, pa, ka), (ub, pb, kb)] {
        let xc = pose.world_to_camera(&x);
        if !(xc[2] > MIN_DEPTH) {
            return Err(GeometryError::CheiralityFailure);
        }
        worst = worst.max((k.apply(&xc) - pixel).norm());
    }
    if worst > TRIANGULATION_MAX_REPROJ_PX {
        return Err(GeometryError::ReprojectionRejected(worst));
    }
    Ok(x)
}
