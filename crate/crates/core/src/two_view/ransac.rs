use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;

use super::five_point::{eight_point, five_point};
use super::{match_rays, Keypoint, MatchSet, TwoViewError, VerificationConfig};
use crate::geom::{CameraIntrinsics, Rotation3, UnitVector3};
use crate::seed::task_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EssentialEstimate {
    /// Unit-Frobenius essential matrix with `x_j^T E x_i = 0`.
    pub essential: Matrix3<f64>,
    pub inlier_mask: Vec<bool>,
    pub iterations: usize,
}

/// First-order geometric (Sampson) distance in normalized units.
pub(crate) fn sampson_distance(e: &Matrix3<f64>, xi: &Vector3<f64>, xj: &Vector3<f64>) -> f64 {
    let exi = e * xi;
    let etxj = e.transpose() * xj;
    let num = xj.dot(&exi);
    let den = exi.x * exi.x + exi.y * exi.y + etxj.x * etxj.x + etxj.y * etxj.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num.abs() / den.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct Score {
    inliers: usize,
    // negated truncated error, so that larger is better
    neg_error: f64,
}

fn score(
    e: &Matrix3<f64>,
    xi: &[Vector3<f64>],
    xj: &[Vector3<f64>],
    px_scale: f64,
    threshold: f64,
) -> (Score, Vec<bool>) {
    let mut inliers = 0;
    let mut err = 0.0;
    let mut mask = Vec::with_capacity(xi.len());
    for (a, b) in xi.iter().zip(xj) {
        let d = sampson_distance(e, a, b) * px_scale;
        let inlier = d <= threshold;
        mask.push(inlier);
        if inlier {
            inliers += 1;
            err += d * d;
        } else {
            err += threshold * threshold;
        }
    }
    (
        Score {
            inliers,
            neg_error: -err,
        },
        mask,
    )
}

fn required_iterations(inlier_fraction: f64, confidence: f64, cap: usize) -> usize {
    if inlier_fraction >= 1.0 {
        return 1;
    }
    let all_good = inlier_fraction.powi(5);
    if all_good <= f64::EPSILON {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - all_good).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Locally optimized RANSAC over five-point hypotheses.
///
/// Inliers have Sampson distance at most `ransac_threshold_px`, measured in
/// pixels by scaling the normalized residual with the mean focal length.
/// Every new best model is re-fitted linearly on its inlier set.
pub fn estimate_essential_ransac(
    matches: &MatchSet,
    kp_i: &[Keypoint],
    kp_j: &[Keypoint],
    intr_i: &CameraIntrinsics,
    intr_j: &CameraIntrinsics,
    cfg: &VerificationConfig,
    seed: u64,
) -> Result<EssentialEstimate, TwoViewError> {
    let n = matches.len();
    if n < 5 {
        return Err(TwoViewError::TooFewMatches { found: n, needed: 5 });
    }
    let (xi, xj) = match_rays(matches, kp_i, kp_j, intr_i, intr_j);
    let px_scale = 0.5 * (intr_i.f + intr_j.f);
    let threshold = cfg.ransac_threshold_px;
    let mut rng = task_rng(seed, &[matches.pair.0 as u64, matches.pair.1 as u64]);

    let mut best: Option<(Score, Matrix3<f64>, Vec<bool>)> = None;
    let mut budget = cfg.max_ransac_iters;
    let mut iterations = 0;
    while iterations < budget {
        iterations += 1;
        let idx = sample(&mut rng, n, 5);
        let si: [Vector3<f64>; 5] = std::array::from_fn(|k| xi[idx.index(k)]);
        let sj: [Vector3<f64>; 5] = std::array::from_fn(|k| xj[idx.index(k)]);
        for e in five_point(&si, &sj) {
            let (s, mask) = score(&e, &xi, &xj, px_scale, threshold);
            if best.as_ref().is_some_and(|(b, _, _)| s <= *b) {
                continue;
            }
            let (s, e, mask) = local_optimization(s, e, mask, &xi, &xj, px_scale, threshold);
            budget = required_iterations(
                s.inliers as f64 / n as f64,
                cfg.ransac_confidence,
                cfg.max_ransac_iters,
            );
            best = Some((s, e, mask));
        }
    }

    match best {
        Some((s, essential, inlier_mask)) if s.inliers >= 5 => Ok(EssentialEstimate {
            essential,
            inlier_mask,
            iterations,
        }),
        _ => Err(TwoViewError::NoModelFound),
    }
}

fn local_optimization(
    mut s: Score,
    mut e: Matrix3<f64>,
    mut mask: Vec<bool>,
    xi: &[Vector3<f64>],
    xj: &[Vector3<f64>],
    px_scale: f64,
    threshold: f64,
) -> (Score, Matrix3<f64>, Vec<bool>) {
    for _ in 0..10 {
        let (ai, aj): (Vec<_>, Vec<_>) = xi
            .iter()
            .zip(xj)
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| (*a, *b))
            .unzip();
        let Some(refit) = eight_point(&ai, &aj) else {
            break;
        };
        let (rs, rmask) = score(&refit, xi, xj, px_scale, threshold);
        if rs <= s {
            break;
        }
        s = rs;
        e = refit;
        mask = rmask;
    }
    (s, e, mask)
}

/// The four `(R, t)` factorizations of an essential matrix.
pub(crate) fn pose_candidates(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    // Order singular values descending so the null direction is last.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    u = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    v_t = Matrix3::from_rows(&[v_t.row(order[0]), v_t.row(order[1]), v_t.row(order[2])]);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = u.column(2).into_owned();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Depths of the two-view midpoint-free linear triangulation of `(xi, xj)`
/// under `X_j = R X_i + t`.
pub(crate) fn two_view_depths(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    xi: &Vector3<f64>,
    xj: &Vector3<f64>,
) -> Option<(f64, f64)> {
    // Solve d_j xj = d_i R xi + t in least squares for (d_i, d_j).
    let a = r * xi;
    let b = -xj;
    let aa = a.dot(&a);
    let ab = a.dot(&b);
    let bb = b.dot(&b);
    let det = aa * bb - ab * ab;
    if det.abs() < 1e-14 * aa * bb {
        return None;
    }
    let ra = -a.dot(t);
    let rb = -b.dot(t);
    let di = (bb * ra - ab * rb) / det;
    let dj = (aa * rb - ab * ra) / det;
    Some((di, dj))
}

/// Picks the factorization with the most points in front of both cameras.
pub fn decompose_essential(
    e: &Matrix3<f64>,
    inliers: &MatchSet,
    kp_i: &[Keypoint],
    kp_j: &[Keypoint],
    intr_i: &CameraIntrinsics,
    intr_j: &CameraIntrinsics,
) -> Result<(Rotation3, UnitVector3), TwoViewError> {
    if inliers.is_empty() {
        return Err(TwoViewError::TooFewMatches { found: 0, needed: 1 });
    }
    let (xi, xj) = match_rays(inliers, kp_i, kp_j, intr_i, intr_j);
    let mut counts = [0usize; 4];
    let candidates = pose_candidates(e);
    for (k, (r, t)) in candidates.iter().enumerate() {
        counts[k] = xi
            .iter()
            .zip(&xj)
            .filter(|(a, b)| {
                two_view_depths(r, t, a, b).is_some_and(|(di, dj)| di > 0.0 && dj > 0.0)
            })
            .count();
    }
    let (best, &count) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .unwrap();
    if 2 * count <= inliers.len() {
        return Err(TwoViewError::CheiralityAmbiguous);
    }
    let (r, t) = candidates[best];
    let rotation = Rotation3::from_matrix_projected(&r);
    let direction = UnitVector3::new_normalize(t).map_err(|_| TwoViewError::CheiralityAmbiguous)?;
    Ok((rotation, direction))
}
