//! Linear (DLT) triangulation from normalized image coordinates.

use nalgebra::{DMatrix, Matrix3x4, Vector2, Vector3};

use crate::geom::Pose3;

/// World-to-camera projection `[R^T | -R^T c]` for a camera-to-world pose.
pub fn world_to_camera(pose: &Pose3) -> Matrix3x4<f64> {
    let rt = pose.rotation.matrix().transpose();
    let t = -(rt * pose.translation);
    let mut p = Matrix3x4::zeros();
    p.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    p.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    p
}

/// Least-squares DLT over two or more views.
///
/// Each view is a world-to-camera matrix and the undistorted normalized
/// coordinate `(x/z, y/z)` of the observation. Rows are scaled to unit norm
/// before the SVD. Returns `None` when the point lies at infinity.
pub fn dlt(views: &[(Matrix3x4<f64>, Vector2<f64>)]) -> Option<Vector3<f64>> {
    if views.len() < 2 {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (k, (p, x)) in views.iter().enumerate() {
        let r0 = p.row(2) * x.x - p.row(0);
        let r1 = p.row(2) * x.y - p.row(1);
        for (row, r) in [(2 * k, r0), (2 * k + 1, r1)] {
            let n = r.norm();
            let n = if n > 0.0 { n } else { 1.0 };
            for c in 0..4 {
                a[(row, c)] = r[c] / n;
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = v_t.row(min_idx);
    if h[3].abs() < 1e-14 * h.norm() {
        return None;
    }
    let point = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    point.iter().all(|v| v.is_finite()).then_some(point)
}

/// Angle in radians between two viewing rays towards `point`.
pub fn ray_angle(center_a: &Vector3<f64>, center_b: &Vector3<f64>, point: &Vector3<f64>) -> f64 {
    let a = point - center_a;
    let b = point - center_b;
    a.cross(&b).norm().atan2(a.dot(&b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Rotation3, Pose3};

    #[test]
    fn two_view_exact() {
        let point = Vector3::new(0.3, -0.2, 5.0);
        let a = Pose3::identity();
        let b = Pose3::new(
            Rotation3::from_axis_angle(&Vector3::y(), 0.2),
            Vector3::new(1.0, 0.1, 0.0),
        );
        let views: Vec<_> = [a, b]
            .iter()
            .map(|p| {
                let c = p.inverse_transform_point(&point);
                (world_to_camera(p), Vector2::new(c.x / c.z, c.y / c.z))
            })
            .collect();
        let x = dlt(&views).unwrap();
        assert!((x - point).norm() < 1e-10);
    }
}
