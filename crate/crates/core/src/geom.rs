//! Rotation, pose and similarity algebra plus the Bundler camera model.
//!
//! Conventions used across the crate:
//!
//! * A camera pose `Pose3` is camera-to-world: `X_world = R * X_cam + c`, so
//!   its translation is the camera center in world coordinates.
//! * A relative rotation `R_ji` maps camera-`i` coordinates into camera-`j`
//!   coordinates: `R_ji = R_j^T R_i`.
//! * Angles are radians internally; every `*_error` function returns degrees.

use std::ops::Mul;

use nalgebra::{Matrix2, Matrix2x3, Matrix2x5, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("vector norm is zero")]
    ZeroVector,
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Skew-symmetric matrix `[v]x` such that `[v]x w = v x w`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// An element of SO(3) stored as a 3x3 orthonormal matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix the caller guarantees is a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Nearest rotation in the Frobenius sense (SVD with determinant fix).
    pub fn from_matrix_projected(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let d = (u * v_t).determinant().signum();
        let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
        Self(u * fix * v_t)
    }

    pub fn exp(omega: &Vector3<f64>) -> Self {
        so3_exp(omega)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        so3_exp(&(axis.normalize() * angle))
    }

    pub fn log(&self) -> Vector3<f64> {
        so3_log(self)
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let m = &self.0;
        let s = 0.5 * vee(&(m - m.transpose())).norm();
        let c = 0.5 * (m.trace() - 1.0);
        s.atan2(c)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Max deviation from `R R^T = I` and `det R = 1`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.0 * self.0.transpose() - Matrix3::identity()).abs().max();
        e.max((self.0.determinant() - 1.0).abs())
    }
}

impl Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

impl Mul<&Rotation3> for &Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: &Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for &Rotation3 {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Rotation3 {
    let theta2 = omega.norm_squared();
    let k = hat(omega);
    let (a, b) = if theta2 < 1e-8 {
        // Taylor expansions of sin(t)/t and (1-cos t)/t^2.
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation3(Matrix3::identity() + k * a + k * k * b)
}

pub fn so3_log(r: &Rotation3) -> Vector3<f64> {
    let m = r.matrix();
    let w = 0.5 * vee(&(m - m.transpose()));
    let s = w.norm();
    let c = 0.5 * (m.trace() - 1.0);
    let theta = s.atan2(c);
    if theta < 1e-4 {
        // theta / sin(theta) ~ 1 + theta^2 / 6
        return w * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta > 1e-3 {
        return w * (theta / s);
    }
    // Near pi: recover the axis from the symmetric part, sign from w.
    let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * c;
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut axis = sym.column(best).into_owned();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Geodesic distance `|log(a^T b)|` in degrees.
pub fn rotation_angular_error(a: &Rotation3, b: &Rotation3) -> f64 {
    (a.inverse() * *b).angle().to_degrees()
}

/// Angle between two nonzero vectors in degrees.
pub fn direction_angular_error(a: &Vector3<f64>, b: &Vector3<f64>) -> Result<f64, GeomError> {
    let na = a.norm();
    let nb = b.norm();
    if na < 1e-12 || nb < 1e-12 {
        return Err(GeomError::ZeroVector);
    }
    // atan2 form stays accurate near 0 and 180 degrees.
    let cross = a.cross(b).norm();
    let dot = a.dot(b);
    Ok(cross.atan2(dot).to_degrees())
}

/// A unit-norm 3-vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitVector3(Vector3<f64>);

impl UnitVector3 {
    pub fn new_normalize(v: Vector3<f64>) -> Result<Self, GeomError> {
        let n = v.norm();
        if n < 1e-12 || !n.is_finite() {
            return Err(GeomError::ZeroVector);
        }
        Ok(Self(v / n))
    }

    pub fn into_inner(self) -> Vector3<f64> {
        self.0
    }

    pub fn as_ref(&self) -> &Vector3<f64> {
        &self.0
    }
}

impl std::ops::Neg for UnitVector3 {
    type Output = UnitVector3;
    fn neg(self) -> UnitVector3 {
        UnitVector3(-self.0)
    }
}

/// Rigid transform. Camera poses are camera-to-world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
}

impl Pose3 {
    pub fn new(rotation: Rotation3, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }

    /// Inverse map: for a camera pose this takes world points to the camera frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix().transpose() * (p - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self::new(rt, -(rt.matrix() * self.translation))
    }

    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3::new(
            self.rotation * other.rotation,
            self.rotation.matrix() * other.translation + self.translation,
        )
    }

    /// Camera-`i` to camera-`j` transform `(R_ji, t_ji)` for camera-to-world poses.
    pub fn relative(pose_i: &Pose3, pose_j: &Pose3) -> Pose3 {
        pose_j.inverse().compose(pose_i)
    }
}

/// Similarity transform acting on points as `s R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3 {
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Sim3 {
    pub fn new(rotation: Rotation3, translation: Vector3<f64>, scale: f64) -> Self {
        assert!(scale > 0.0, "Sim3 scale must be positive");
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros(), 1.0)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p * self.scale + self.translation
    }

    /// Moves a camera-to-world pose into the transformed world frame.
    pub fn transform_pose(&self, pose: &Pose3) -> Pose3 {
        Pose3::new(
            self.rotation * pose.rotation,
            self.transform_point(&pose.translation),
        )
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        let s = 1.0 / self.scale;
        Self::new(rt, -(rt.matrix() * self.translation) * s, s)
    }
}

/// Bundler camera: one focal length, two radial terms, principal point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub k1: f64,
    pub k2: f64,
    pub u0: f64,
    pub v0: f64,
}

impl CameraIntrinsics {
    pub fn new(f: f64, k1: f64, k2: f64, u0: f64, v0: f64) -> Result<Self, GeomError> {
        let intr = Self { f, k1, k2, u0, v0 };
        intr.validate()?;
        Ok(intr)
    }

    pub fn pinhole(f: f64, u0: f64, v0: f64) -> Self {
        Self {
            f,
            k1: 0.0,
            k2: 0.0,
            u0,
            v0,
        }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let all_finite = [self.f, self.k1, self.k2, self.u0, self.v0]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(GeomError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.f <= 0.0 {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal length {} must be positive",
                self.f
            )));
        }
        Ok(())
    }

    /// Radial factor `1 + k1 r^2 + k2 r^4` for normalized coordinates.
    pub fn radial_factor(&self, normalized: &Vector2<f64>) -> f64 {
        let r2 = normalized.norm_squared();
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    pub fn normalized_to_pixel(&self, normalized: &Vector2<f64>) -> Vector2<f64> {
        let d = self.radial_factor(normalized);
        Vector2::new(
            self.f * d * normalized.x + self.u0,
            self.f * d * normalized.y + self.v0,
        )
    }

    /// Projects a point given in camera coordinates.
    pub fn project_camera_point(&self, p_cam: &Vector3<f64>) -> Result<Vector2<f64>, GeomError> {
        if p_cam.z <= 1e-9 {
            return Err(GeomError::BehindCamera { depth: p_cam.z });
        }
        let n = Vector2::new(p_cam.x / p_cam.z, p_cam.y / p_cam.z);
        Ok(self.normalized_to_pixel(&n))
    }

    /// Projection of a camera-frame point with its derivatives with respect to
    /// the point and to `(f, k1, k2, u0, v0)`.
    pub fn project_with_jacobians(
        &self,
        p_cam: &Vector3<f64>,
    ) -> Result<(Vector2<f64>, Matrix2x3<f64>, Matrix2x5<f64>), GeomError> {
        if p_cam.z <= 1e-9 {
            return Err(GeomError::BehindCamera { depth: p_cam.z });
        }
        let iz = 1.0 / p_cam.z;
        let n = Vector2::new(p_cam.x * iz, p_cam.y * iz);
        let r2 = n.norm_squared();
        let d = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let px = Vector2::new(self.f * d * n.x + self.u0, self.f * d * n.y + self.v0);

        let dd_dr2 = self.k1 + 2.0 * self.k2 * r2;
        let d_px_d_n = (Matrix2::identity() * d + n * n.transpose() * (2.0 * dd_dr2)) * self.f;
        let d_n_d_p = Matrix2x3::new(iz, 0.0, -n.x * iz, 0.0, iz, -n.y * iz);
        let d_px_d_p = d_px_d_n * d_n_d_p;

        let d_px_d_intr = Matrix2x5::new(
            d * n.x,
            self.f * r2 * n.x,
            self.f * r2 * r2 * n.x,
            1.0,
            0.0,
            d * n.y,
            self.f * r2 * n.y,
            self.f * r2 * r2 * n.y,
            0.0,
            1.0,
        );
        Ok((px, d_px_d_p, d_px_d_intr))
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.f, self.k1, self.k2, self.u0, self.v0]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            f: a[0],
            k1: a[1],
            k2: a[2],
            u0: a[3],
            v0: a[4],
        }
    }

    /// Inverts the distortion polynomial by fixed-point iteration.
    pub fn pixel_to_normalized(&self, px: &Vector2<f64>) -> Vector2<f64> {
        let distorted = Vector2::new((px.x - self.u0) / self.f, (px.y - self.v0) / self.f);
        if self.k1 == 0.0 && self.k2 == 0.0 {
            return distorted;
        }
        let mut n = distorted;
        for _ in 0..100 {
            let next = distorted / self.radial_factor(&n);
            let delta = (next - n).norm();
            n = next;
            if delta < 1e-15 {
                break;
            }
        }
        n
    }

    /// Unit-free bearing `[x, y, 1]` of a pixel in the camera frame.
    pub fn pixel_to_ray(&self, px: &Vector2<f64>) -> Vector3<f64> {
        let n = self.pixel_to_normalized(px);
        Vector3::new(n.x, n.y, 1.0)
    }
}

/// Projects a world point through a camera-to-world pose.
pub fn project(
    point_world: &Vector3<f64>,
    pose: &Pose3,
    intr: &CameraIntrinsics,
) -> Result<Vector2<f64>, GeomError> {
    intr.project_camera_point(&pose.inverse_transform_point(point_world))
}

/// Intrinsic (Karcher) mean on SO(3) by gradient descent with unit step.
pub fn karcher_mean(rotations: &[Rotation3]) -> Option<Rotation3> {
    let first = *rotations.first()?;
    let mut mean = first;
    let n = rotations.len() as f64;
    for _ in 0..100 {
        let mut step = Vector3::zeros();
        for r in rotations {
            step += (mean.inverse() * *r).log();
        }
        step /= n;
        mean = mean * so3_exp(&step);
        if step.norm() < 1e-10 {
            break;
        }
    }
    Some(mean)
}

/// Sim(3) taking `estimated` camera poses onto `reference`.
///
/// Rotation is the Karcher mean of the per-camera world-frame corrections;
/// scale and translation then follow in closed form from the camera centers.
pub fn sim3_align(estimated: &[Pose3], reference: &[Pose3]) -> Result<Sim3, GeomError> {
    if estimated.len() != reference.len() {
        return Err(GeomError::Degenerate(format!(
            "pose count mismatch ({} vs {})",
            estimated.len(),
            reference.len()
        )));
    }
    if estimated.len() < 2 {
        return Err(GeomError::Degenerate("need at least two pose pairs".into()));
    }
    let corrections: Vec<Rotation3> = estimated
        .iter()
        .zip(reference)
        .map(|(e, r)| r.rotation * e.rotation.inverse())
        .collect();
    let rotation = karcher_mean(&corrections).expect("non-empty");

    let n = estimated.len() as f64;
    let mean_est = estimated
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.translation)
        / n;
    let mean_ref = reference
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.translation)
        / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (e, r) in estimated.iter().zip(reference) {
        let de = rotation.matrix() * (e.translation - mean_est);
        let dr = r.translation - mean_ref;
        num += dr.dot(&de);
        den += de.norm_squared();
    }
    if den < 1e-24 {
        return Err(GeomError::Degenerate("all camera centers coincide".into()));
    }
    let scale = num / den;
    if scale <= 0.0 {
        return Err(GeomError::Degenerate(format!(
            "non-positive alignment scale {scale}"
        )));
    }
    let translation = mean_ref - rotation.matrix() * mean_est * scale;
    Ok(Sim3::new(rotation, translation, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_rotation(rng: &mut impl Rng) -> Rotation3 {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Rotation3::from_axis_angle(&axis, rng.random_range(0.0..3.0))
    }

    fn taylor_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
        let k = hat(omega);
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for n in 1..20 {
            term = term * k / n as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn exp_identity_and_quarter_turn() {
        assert_eq!(*so3_exp(&Vector3::zeros()).matrix(), Matrix3::identity());
        let r = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0));
        let y = r.rotate(&Vector3::x());
        assert_relative_eq!(y, Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn exp_matches_taylor_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let omega = dir * 0.3;
            let diff = so3_exp(&omega).matrix() - taylor_exp(&omega);
            assert!(diff.abs().max() < 1e-12);
        }
    }

    #[test]
    fn log_near_pi() {
        let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        for angle in [PI - 1e-6, PI - 1e-4, PI - 2e-3] {
            let w = axis * angle;
            let back = so3_log(&so3_exp(&w));
            assert!((back - w).norm() < 1e-9, "angle {angle}");
        }
    }

    #[test]
    fn angular_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = random_rotation(&mut rng);
        assert!(rotation_angular_error(&r, &r) < 1e-12);
        let q = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0));
        assert_relative_eq!(
            rotation_angular_error(&Rotation3::identity(), &q),
            90.0,
            epsilon = 1e-12
        );
        for _ in 0..20 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let tr = (a.matrix().transpose() * b.matrix()).trace();
            let oracle = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
            assert!((rotation_angular_error(&a, &b) - oracle).abs() < 1e-9);
            assert!(
                (rotation_angular_error(&a, &b) - rotation_angular_error(&b, &a)).abs() < 1e-12
            );
        }
    }

    #[test]
    fn direction_error_examples() {
        let v = Vector3::new(0.3, -1.0, 2.0);
        assert!(direction_angular_error(&v, &v).unwrap() < 1e-12);
        assert_relative_eq!(
            direction_angular_error(&Vector3::x(), &Vector3::y()).unwrap(),
            90.0
        );
        assert_relative_eq!(
            direction_angular_error(&Vector3::x(), &-Vector3::x()).unwrap(),
            180.0
        );
        assert_eq!(
            direction_angular_error(&Vector3::zeros(), &Vector3::x()),
            Err(GeomError::ZeroVector)
        );
    }

    #[test]
    fn projection_examples() {
        let intr = CameraIntrinsics::pinhole(100.0, 320.0, 240.0);
        let px = project(&Vector3::new(0.0, 0.0, 4.0), &Pose3::identity(), &intr).unwrap();
        assert_eq!(px, Vector2::new(320.0, 240.0));

        let intr = CameraIntrinsics::pinhole(100.0, 0.0, 0.0);
        let px = project(&Vector3::new(1.0, 0.0, 1.0), &Pose3::identity(), &intr).unwrap();
        assert_relative_eq!(px, Vector2::new(100.0, 0.0));

        // 0.5 * (1 + 0.1 * 0.25) * 100
        let intr = CameraIntrinsics::new(100.0, 0.1, 0.0, 0.0, 0.0).unwrap();
        let px = project(&Vector3::new(0.5, 0.0, 1.0), &Pose3::identity(), &intr).unwrap();
        assert_relative_eq!(px, Vector2::new(51.25, 0.0), epsilon = 1e-12);

        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &Pose3::identity(), &intr),
            Err(GeomError::BehindCamera { .. })
        ));
        assert!(CameraIntrinsics::new(0.0, 0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn undistort_inverts_distortion() {
        let intr = CameraIntrinsics::new(600.0, -0.12, 0.03, 380.0, 285.0).unwrap();
        let n = Vector2::new(0.31, -0.22);
        let px = intr.normalized_to_pixel(&n);
        assert!((intr.pixel_to_normalized(&px) - n).norm() < 1e-13);
    }

    #[test]
    fn sim3_align_identity_and_known() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poses: Vec<Pose3> = (0..6)
            .map(|_| {
                Pose3::new(
                    random_rotation(&mut rng),
                    Vector3::new(
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                    ),
                )
            })
            .collect();
        let t = sim3_align(&poses, &poses).unwrap();
        assert!(t.rotation.angle() < 1e-9);
        assert!(t.translation.norm() < 1e-9);
        assert!((t.scale - 1.0).abs() < 1e-9);

        let known = Sim3::new(
            random_rotation(&mut rng),
            Vector3::new(0.5, -2.0, 1.0),
            2.7,
        );
        let moved: Vec<Pose3> = poses.iter().map(|p| known.transform_pose(p)).collect();
        // align moved onto poses: should return the inverse of `known`
        let t = sim3_align(&moved, &poses).unwrap();
        let inv = known.inverse();
        assert!(rotation_angular_error(&t.rotation, &inv.rotation) < 1e-7);
        assert!((t.translation - inv.translation).norm() < 1e-9);
        assert!((t.scale - inv.scale).abs() < 1e-9);
    }

    #[test]
    fn sim3_align_degenerate() {
        let p = Pose3::identity();
        assert!(matches!(
            sim3_align(&[p], &[p]),
            Err(GeomError::Degenerate(_))
        ));
        assert!(matches!(
            sim3_align(&[p, p], &[p, p]),
            Err(GeomError::Degenerate(_))
        ));
    }

    #[test]
    fn sim3_align_noisy_beats_scale_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = rand_distr::Normal::new(0.0, 0.01).unwrap();
        let reference: Vec<Pose3> = (0..10)
            .map(|_| {
                Pose3::new(
                    random_rotation(&mut rng),
                    Vector3::new(
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                    ),
                )
            })
            .collect();
        let known = Sim3::new(random_rotation(&mut rng), Vector3::new(1.0, 2.0, 3.0), 0.4);
        let estimated: Vec<Pose3> = reference
            .iter()
            .map(|p| {
                let mut q = known.transform_pose(p);
                q.translation += Vector3::from_fn(|_, _| rng.sample(normal));
                q
            })
            .collect();
        let t = sim3_align(&estimated, &reference).unwrap();
        let residual = |s: f64, with_t: Option<Vector3<f64>>| -> f64 {
            let mapped: Vec<Vector3<f64>> = estimated
                .iter()
                .map(|e| t.rotation.matrix() * e.translation * s)
                .collect();
            let shift = with_t.unwrap_or_else(|| {
                reference
                    .iter()
                    .zip(&mapped)
                    .fold(Vector3::zeros(), |a, (r, m)| a + r.translation - m)
                    / reference.len() as f64
            });
            reference
                .iter()
                .zip(&mapped)
                .map(|(r, m)| (r.translation - m - shift).norm_squared())
                .sum()
        };
        let ours = residual(t.scale, Some(t.translation));
        let grid_best = (1..=20000)
            .map(|k| residual(k as f64 * 5e-4, None))
            .fold(f64::INFINITY, f64::min);
        assert!(ours <= grid_best + 1e-3, "ours {ours} grid {grid_best}");
    }
}
