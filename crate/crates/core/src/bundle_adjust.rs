//! Robust Levenberg-Marquardt over poses, intrinsics and landmarks with
//! Schur elimination of the points, and the staged filtering schedule.
//!
//! Local pose coordinates are `(dtheta, dc)` with `R <- R exp(dtheta)` and
//! `c <- c + dc`.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x5, Matrix2x6, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_assoc::Landmark;
use crate::executor::Executor;
use crate::geom::{hat, CameraIntrinsics, Pose3, Rotation3};
use crate::robust::Loss;

/// Residual reported for an observation whose point is behind the camera.
/// It is constant, so it carries no Jacobian, but large enough that moving a
/// point behind a camera never pays off.
pub const BEHIND_CAMERA_RESIDUAL_PX: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaCamera {
    pub pose: Pose3,
    pub intrinsics: CameraIntrinsics,
    /// Cameras with the same group share one optimized intrinsics block;
    /// `None` holds the intrinsics fixed.
    pub intrinsics_group: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaProblem {
    /// Indexed by image id; `None` for unregistered images.
    pub cameras: Vec<Option<BaCamera>>,
    pub landmarks: Vec<Landmark>,
}

impl BaProblem {
    /// First and second registered cameras: the first is held fixed and the
    /// distance of the second to it is frozen.
    pub fn gauge(&self) -> (Option<usize>, Option<usize>) {
        let mut it = self.cameras.iter().enumerate().filter(|(_, c)| c.is_some()).map(|(k, _)| k);
        (it.next(), it.next())
    }

    /// `(landmark, image, observed px)` for every inlier observation in a
    /// registered camera.
    pub fn observations(&self) -> impl Iterator<Item = (usize, usize, Vector2<f64>)> + '_ {
        self.landmarks.iter().enumerate().flat_map(move |(l, lm)| {
            lm.inlier_observations()
                .filter(move |o| self.cameras.get(o.image_id).is_some_and(|c| c.is_some()))
                .map(move |o| (l, o.image_id, o.position))
        })
    }

    pub fn reprojection_errors(&self, landmark: usize) -> Vec<f64> {
        let lm = &self.landmarks[landmark];
        lm.inlier_observations()
            .filter_map(|o| {
                let cam = self.cameras.get(o.image_id)?.as_ref()?;
                Some(match cam.intrinsics.project_camera_point(&cam.pose.inverse_transform_point(&lm.point)) {
                    Ok(px) => (px - o.position).norm(),
                    Err(_) => f64::INFINITY,
                })
            })
            .collect()
    }

    /// Mean over all used observations.
    pub fn mean_reprojection_error(&self) -> f64 {
        let (sum, n) = (0..self.landmarks.len())
            .flat_map(|l| self.reprojection_errors(l))
            .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
        if n == 0 { 0.0 } else { sum / n as f64 }
    }

    fn refresh_landmark_errors(&mut self) {
        for l in 0..self.landmarks.len() {
            let e = self.reprojection_errors(l);
            self.landmarks[l].mean_reprojection_error_px =
                if e.is_empty() { 0.0 } else { e.iter().sum::<f64>() / e.len() as f64 };
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaError {
    #[error("no track survived the {threshold_px} px filter")]
    AllTracksFiltered { threshold_px: f64 },
    #[error("observation references image {image} which has no camera")]
    MissingCamera { image: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaConfig {
    /// Huber transition in pixels; `None` gives plain least squares.
    #[serde(with = "crate::robust::optional_scale")]
    pub huber_px: Option<f64>,
    pub max_iters: usize,
    pub initial_lambda: f64,
    pub relative_decrease_tol: f64,
    pub gradient_tol: f64,
    pub filter_thresholds_px: Vec<f64>,
    pub min_track_length: usize,
    /// Refine one shared Bundler block per intrinsics group. Off for
    /// synthetic scenes, whose intrinsics are exact.
    pub optimize_intrinsics: bool,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            huber_px: Some(1.345),
            max_iters: 100,
            initial_lambda: 1e-4,
            relative_decrease_tol: 1e-9,
            gradient_tol: 1e-10,
            filter_thresholds_px: vec![10.0, 5.0, 3.0],
            min_track_length: 3,
            optimize_intrinsics: true,
        }
    }
}

impl BaConfig {
    fn loss(&self) -> Loss {
        match self.huber_px {
            Some(g) => Loss::huber(g),
            None => Loss::Squared,
        }
    }
}

/// Linearization of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBlock {
    pub landmark: usize,
    pub camera: usize,
    /// Projected minus observed, px.
    pub residual: Vector2<f64>,
    pub d_pose: Matrix2x6<f64>,
    pub d_intrinsics: Matrix2x5<f64>,
    pub d_point: Matrix2x3<f64>,
    pub behind_camera: bool,
}

fn linearize_observation(
    cam: &BaCamera,
    point: &Vector3<f64>,
    observed: &Vector2<f64>,
    landmark: usize,
    camera: usize,
) -> ObservationBlock {
    let r_t = cam.pose.rotation.matrix().transpose();
    let p_cam = cam.pose.inverse_transform_point(point);
    match cam.intrinsics.project_with_jacobians(&p_cam) {
        Ok((px, d_px_d_pc, d_intr)) => {
            let mut d_pose = Matrix2x6::zeros();
            d_pose.fixed_columns_mut::<3>(0).copy_from(&(d_px_d_pc * hat(&p_cam)));
            d_pose.fixed_columns_mut::<3>(3).copy_from(&(-d_px_d_pc * r_t));
            ObservationBlock {
                landmark,
                camera,
                residual: px - observed,
                d_pose,
                d_intrinsics: d_intr,
                d_point: d_px_d_pc * r_t,
                behind_camera: false,
            }
        }
        Err(_) => ObservationBlock {
            landmark,
            camera,
            residual: Vector2::repeat(BEHIND_CAMERA_RESIDUAL_PX / std::f64::consts::SQRT_2),
            d_pose: Matrix2x6::zeros(),
            d_intrinsics: Matrix2x5::zeros(),
            d_point: Matrix2x3::zeros(),
            behind_camera: true,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaJacobian {
    /// Stacked residuals, two rows per block.
    pub residuals: DVector<f64>,
    pub blocks: Vec<ObservationBlock>,
}

/// Residuals and analytic block Jacobian, one block per used observation,
/// ordered by landmark then observation.
pub fn ba_residuals_and_jacobian(problem: &BaProblem) -> BaJacobian {
    let blocks: Vec<ObservationBlock> = problem
        .observations()
        .map(|(l, i, obs)| {
            let cam = problem.cameras[i].as_ref().expect("registered");
            linearize_observation(cam, &problem.landmarks[l].point, &obs, l, i)
        })
        .collect();
    let mut residuals = DVector::zeros(2 * blocks.len());
    for (k, b) in blocks.iter().enumerate() {
        residuals.fixed_rows_mut::<2>(2 * k).copy_from(&b.residual);
    }
    BaJacobian { residuals, blocks }
}

/// Column layout of the reduced (camera-side) system.
struct Layout {
    /// Per image: first column and basis mapping reduced pose coordinates to
    /// the local 6-vector.
    pose: Vec<Option<(usize, DMatrix<f64>)>>,
    /// Per intrinsics group: first column.
    intrinsics: Vec<Option<usize>>,
    dim: usize,
}

/// Leading entries of `CameraIntrinsics::to_array` that are refined: `f`,
/// `k1`, `k2`. The principal point stays fixed as in the Bundler model; on an
/// inward-looking orbit it trades off against rotation and overfits noise.
const REFINED_INTRINSICS: usize = 3;

fn layout(problem: &BaProblem, optimize_intrinsics: bool) -> Layout {
    let (fixed, scale) = problem.gauge();
    let mut dim = 0;
    let mut pose = vec![None; problem.cameras.len()];
    for (k, cam) in problem.cameras.iter().enumerate() {
        let Some(cam) = cam else { continue };
        if Some(k) == fixed {
            continue;
        }
        let basis = if Some(k) == scale {
            let anchor = problem.cameras[fixed.expect("fixed camera")].as_ref().expect("registered");
            let b = (cam.pose.translation - anchor.pose.translation).normalize();
            let helper = if b.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let t1 = b.cross(&helper).normalize();
            let t2 = b.cross(&t1);
            let mut m = DMatrix::zeros(6, 5);
            for d in 0..3 {
                m[(d, d)] = 1.0;
            }
            for d in 0..3 {
                m[(3 + d, 3)] = t1[d];
                m[(3 + d, 4)] = t2[d];
            }
            m
        } else {
            DMatrix::identity(6, 6)
        };
        let n = basis.ncols();
        pose[k] = Some((dim, basis));
        dim += n;
    }
    let n_groups = problem
        .cameras
        .iter()
        .flatten()
        .filter_map(|c| c.intrinsics_group)
        .map(|g| g + 1)
        .max()
        .unwrap_or(0);
    let mut intrinsics = vec![None; n_groups];
    if optimize_intrinsics {
        for cam in problem.cameras.iter().flatten() {
            if let Some(g) = cam.intrinsics_group {
                if intrinsics[g].is_none() {
                    intrinsics[g] = Some(dim);
                    dim += REFINED_INTRINSICS;
                }
            }
        }
    }
    Layout { pose, intrinsics, dim }
}

/// One observation in reduced coordinates.
struct ObsLin {
    cols: Vec<usize>,
    jc: DMatrix<f64>,
    jp: Matrix2x3<f64>,
    r: Vector2<f64>,
    w: f64,
}

struct LandmarkLin {
    obs: Vec<ObsLin>,
}

fn cost_of(problem: &BaProblem, loss: &Loss) -> f64 {
    problem
        .observations()
        .map(|(l, i, obs)| {
            let cam = problem.cameras[i].as_ref().expect("registered");
            let p_cam = cam.pose.inverse_transform_point(&problem.landmarks[l].point);
            let r = match cam.intrinsics.project_camera_point(&p_cam) {
                Ok(px) => (px - obs).norm(),
                Err(_) => BEHIND_CAMERA_RESIDUAL_PX,
            };
            loss.cost(r)
        })
        .sum()
}

fn linearize(problem: &BaProblem, lay: &Layout, loss: &Loss, executor: &Executor) -> Vec<LandmarkLin> {
    executor.map(&problem.landmarks, |l, lm| {
        let obs = lm
            .inlier_observations()
            .filter_map(|o| {
                let cam = problem.cameras.get(o.image_id)?.as_ref()?;
                let b = linearize_observation(cam, &lm.point, &o.position, l, o.image_id);
                if b.behind_camera {
                    return None;
                }
                let mut cols = Vec::new();
                let mut blocks: Vec<DMatrix<f64>> = Vec::new();
                if let Some((start, basis)) = &lay.pose[o.image_id] {
                    let dp = DMatrix::from_column_slice(2, 6, b.d_pose.as_slice()) * basis;
                    cols.extend(*start..*start + basis.ncols());
                    blocks.push(dp);
                }
                if let Some(Some(start)) = cam.intrinsics_group.map(|g| lay.intrinsics[g]) {
                    cols.extend(start..start + REFINED_INTRINSICS);
                    blocks.push(DMatrix::from_column_slice(2, REFINED_INTRINSICS, &b.d_intrinsics.as_slice()[..2 * REFINED_INTRINSICS]));
                }
                let mut jc = DMatrix::zeros(2, cols.len());
                let mut c = 0;
                for blk in blocks {
                    jc.columns_mut(c, blk.ncols()).copy_from(&blk);
                    c += blk.ncols();
                }
                Some(ObsLin {
                    cols,
                    jc,
                    jp: b.d_point,
                    w: loss.weight(b.residual.norm()),
                    r: b.residual,
                })
            })
            .collect();
        LandmarkLin { obs }
    })
}

/// Per-landmark damped point block and its inverse.
fn point_system(lin: &LandmarkLin, lambda: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let mut hpp = Matrix3::zeros();
    let mut gp = Vector3::zeros();
    for o in &lin.obs {
        hpp += o.jp.transpose() * o.jp * o.w;
        gp += o.jp.transpose() * o.r * o.w;
    }
    for d in 0..3 {
        hpp[(d, d)] += lambda * hpp[(d, d)] + 1e-12;
    }
    let inv = hpp.try_inverse().unwrap_or_else(Matrix3::zeros);
    (inv, gp)
}

struct Reduced {
    s: DMatrix<f64>,
    rhs: DVector<f64>,
    gradient_norm: f64,
}

fn reduce(lins: &[LandmarkLin], dim: usize, lambda: f64, executor: &Executor) -> Reduced {
    // Each landmark contributes dense blocks over the columns it touches;
    // accumulation runs in landmark order so the sum is reproducible.
    let parts = executor.map(lins, |_, lin| {
        let (hpp_inv, gp) = point_system(lin, lambda);
        let mut cols: Vec<usize> = lin.obs.iter().flat_map(|o| o.cols.iter().copied()).collect();
        cols.sort_unstable();
        cols.dedup();
        let pos = |c: usize| cols.binary_search(&c).expect("column");
        let m = cols.len();
        let mut hcc = DMatrix::<f64>::zeros(m, m);
        let mut hcp = DMatrix::<f64>::zeros(m, 3);
        let mut gc = DVector::<f64>::zeros(m);
        for o in &lin.obs {
            let idx: Vec<usize> = o.cols.iter().map(|&c| pos(c)).collect();
            let jtj = o.jc.transpose() * &o.jc * o.w;
            let jtp = o.jc.transpose() * DMatrix::from_column_slice(2, 3, o.jp.as_slice()) * o.w;
            let jtr = o.jc.transpose() * DVector::from_column_slice(o.r.as_slice()) * o.w;
            for (a, &ia) in idx.iter().enumerate() {
                for (b, &ib) in idx.iter().enumerate() {
                    hcc[(ia, ib)] += jtj[(a, b)];
                }
                for d in 0..3 {
                    hcp[(ia, d)] += jtp[(a, d)];
                }
                gc[ia] += jtr[a];
            }
        }
        let hpp_inv = DMatrix::from_column_slice(3, 3, hpp_inv.as_slice());
        let gp = DVector::from_column_slice(gp.as_slice());
        let k = &hcp * &hpp_inv;
        let s = hcc - &k * hcp.transpose();
        let rhs = -&gc + &k * gp;
        (cols, s, rhs, gc)
    });
    let mut s = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    let mut grad = DVector::<f64>::zeros(dim);
    for (cols, sl, rl, gl) in parts {
        for (a, &ca) in cols.iter().enumerate() {
            for (b, &cb) in cols.iter().enumerate() {
                s[(ca, cb)] += sl[(a, b)];
            }
            rhs[ca] += rl[a];
            grad[ca] += gl[a];
        }
    }
    let point_grad: f64 = lins
        .iter()
        .map(|lin| lin.obs.iter().map(|o| o.jp.transpose() * o.r * o.w).sum::<Vector3<f64>>().norm_squared())
        .sum();
    Reduced {
        gradient_norm: f64::sqrt(grad.norm_squared() + point_grad),
        s,
        rhs,
    }
}

fn apply_update(
    problem: &BaProblem,
    lay: &Layout,
    lins: &[LandmarkLin],
    dc: &DVector<f64>,
    lambda: f64,
) -> BaProblem {
    let mut out = problem.clone();
    let (fixed, scale) = problem.gauge();
    for (k, slot) in lay.pose.iter().enumerate() {
        let Some((start, basis)) = slot else { continue };
        let local = basis * dc.rows(*start, basis.ncols());
        let cam = out.cameras[k].as_mut().expect("registered");
        let dtheta = Vector3::new(local[0], local[1], local[2]);
        let dcenter = Vector3::new(local[3], local[4], local[5]);
        cam.pose.rotation = Rotation3::from_matrix_projected(&(cam.pose.rotation.matrix() * Rotation3::exp(&dtheta).matrix()));
        cam.pose.translation += dcenter;
    }
    if let (Some(f), Some(s)) = (fixed, scale) {
        // Retract the second camera back onto the sphere of fixed radius.
        let anchor = problem.cameras[f].as_ref().expect("registered").pose.translation;
        let radius = (problem.cameras[s].as_ref().expect("registered").pose.translation - anchor).norm();
        let cam = out.cameras[s].as_mut().expect("registered");
        let v = cam.pose.translation - anchor;
        cam.pose.translation = anchor + v * (radius / v.norm());
    }
    for cam in out.cameras.iter_mut().flatten() {
        if let Some(Some(start)) = cam.intrinsics_group.map(|g| lay.intrinsics.get(g).copied().flatten()) {
            let mut a = cam.intrinsics.to_array();
            for d in 0..REFINED_INTRINSICS {
                a[d] += dc[start + d];
            }
            cam.intrinsics = CameraIntrinsics::from_array(a);
        }
    }
    for (l, lin) in lins.iter().enumerate() {
        let (hpp_inv, gp) = point_system(lin, lambda);
        let mut hpc_dc = Vector3::zeros();
        for o in &lin.obs {
            let jc_dc = &o.jc * DVector::from_iterator(o.cols.len(), o.cols.iter().map(|&c| dc[c]));
            hpc_dc += o.jp.transpose() * Vector2::new(jc_dc[0], jc_dc[1]) * o.w;
        }
        out.landmarks[l].point += hpp_inv * (-gp - hpc_dc);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaRoundReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_tracks_kept: usize,
    pub filter_threshold_px: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaReport {
    pub rounds: Vec<BaRoundReport>,
}

/// Levenberg-Marquardt until the relative decrease or the gradient is tiny
/// or the iteration budget runs out; only cost-decreasing steps are taken.
pub fn run_bundle_adjustment(
    problem: &BaProblem,
    cfg: &BaConfig,
    executor: &Executor,
) -> Result<(BaProblem, BaRoundReport), BaError> {
    for (_, i, _) in problem.observations() {
        if problem.cameras[i].is_none() {
            return Err(BaError::MissingCamera { image: i });
        }
    }
    let loss = cfg.loss();
    let mut current = problem.clone();
    let mut cost = cost_of(&current, &loss);
    let initial_cost = cost;
    let mut lambda = cfg.initial_lambda;
    let mut iterations = 0;
    let mut converged = false;
    let lay = layout(&current, cfg.optimize_intrinsics);
    while iterations < cfg.max_iters {
        let lins = linearize(&current, &lay, &loss, executor);
        let mut accepted = false;
        let mut stop = false;
        for _ in 0..12 {
            let red = reduce(&lins, lay.dim, lambda, executor);
            if red.gradient_norm < cfg.gradient_tol {
                stop = true;
                break;
            }
            let mut s = red.s.clone();
            for d in 0..lay.dim {
                s[(d, d)] += lambda * red.s[(d, d)] + 1e-12;
            }
            let dc = match s.cholesky() {
                Some(ch) => ch.solve(&red.rhs),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let candidate = apply_update(&current, &lay, &lins, &dc, lambda);
            let new_cost = cost_of(&candidate, &loss);
            if new_cost < cost {
                let rel = (cost - new_cost) / cost.max(1e-300);
                current = candidate;
                cost = new_cost;
                lambda = (lambda * 0.1).max(1e-15);
                accepted = true;
                if rel < cfg.relative_decrease_tol {
                    stop = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if accepted {
            iterations += 1;
        }
        if stop || !accepted {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("bundle adjustment stopped after {iterations} iterations without converging");
    }
    current.refresh_landmark_errors();
    let n_tracks_kept = current.landmarks.len();
    Ok((
        current,
        BaRoundReport {
            initial_cost,
            final_cost: cost,
            iterations,
            converged,
            n_tracks_kept,
            filter_threshold_px: None,
        },
    ))
}

/// Drops landmarks whose largest inlier reprojection error exceeds
/// `threshold_px` or that keep fewer than `min_track_length` usable views.
pub fn filter_tracks(problem: &BaProblem, threshold_px: f64, min_track_length: usize) -> Result<BaProblem, BaError> {
    let landmarks: Vec<Landmark> = (0..problem.landmarks.len())
        .filter(|&l| {
            let e = problem.reprojection_errors(l);
            e.len() >= min_track_length && e.iter().all(|&x| x <= threshold_px)
        })
        .map(|l| problem.landmarks[l].clone())
        .collect();
    if landmarks.is_empty() {
        return Err(BaError::AllTracksFiltered { threshold_px });
    }
    Ok(BaProblem {
        cameras: problem.cameras.clone(),
        landmarks,
    })
}

/// Bundle adjustment followed by filtering, once per threshold.
pub fn three_round_ba(
    problem: &BaProblem,
    cfg: &BaConfig,
    executor: &Executor,
) -> Result<(BaProblem, BaReport), BaError> {
    let mut current = problem.clone();
    let mut report = BaReport::default();
    for &threshold in &cfg.filter_thresholds_px {
        let (refined, mut round) = run_bundle_adjustment(&current, cfg, executor)?;
        current = filter_tracks(&refined, threshold, cfg.min_track_length)?;
        round.n_tracks_kept = current.landmarks.len();
        round.filter_threshold_px = Some(threshold);
        log::info!(
            "BA round at {threshold} px: cost {:.4e} -> {:.4e} in {} iterations, {} tracks kept",
            round.initial_cost,
            round.final_cost,
            round.iterations,
            round.n_tracks_kept
        );
        report.rounds.push(round);
    }
    Ok((current, report))
}
