//! Multi-view tracks from pairwise inlier correspondences, and their
//! robust triangulation.

use std::collections::HashMap;

use nalgebra::{Matrix3x4, Vector2, Vector3};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::Executor;
use crate::geom::{CameraIntrinsics, Pose3};
use crate::seed::task_rng;
use crate::triangulate::{dlt, ray_angle, world_to_camera};
use crate::two_view::{Keypoint, TwoViewMeasurement};

/// Union-find with path halving and union by size.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> usize {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return ra;
        }
        if self.size[ra] < self.size[rb] || (self.size[ra] == self.size[rb] && rb < ra) {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        ra
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackObservation {
    pub image_id: usize,
    pub keypoint: usize,
    pub position: Vector2<f64>,
}

/// Observations of one scene point, at most one per image, sorted by image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track2D {
    pub observations: Vec<TrackObservation>,
}

impl Track2D {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub track: Track2D,
    pub point: Vector3<f64>,
    pub inlier_mask: Vec<bool>,
    pub mean_reprojection_error_px: f64,
}

impl Landmark {
    pub fn inlier_observations(&self) -> impl Iterator<Item = &TrackObservation> {
        self.track
            .observations
            .iter()
            .zip(&self.inlier_mask)
            .filter(|(_, &m)| m)
            .map(|(o, _)| o)
    }

    pub fn n_inliers(&self) -> usize {
        self.inlier_mask.iter().filter(|&&m| m).count()
    }
}

/// Transitive closure of the inlier correspondences.
///
/// Tracks holding two different keypoints of the same image are discarded.
/// The output is sorted by first observation, so it does not depend on the
/// order of `measurements`.
pub fn build_tracks(measurements: &[TwoViewMeasurement], keypoints: &[Vec<Keypoint>]) -> Vec<Track2D> {
    let mut nodes: Vec<(usize, usize)> = measurements
        .iter()
        .flat_map(|m| {
            let (i, j) = m.pair;
            m.inliers
                .matches
                .iter()
                .flat_map(move |&(a, b)| [(i, a), (j, b)])
        })
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    let index: HashMap<(usize, usize), usize> =
        nodes.iter().enumerate().map(|(k, &n)| (n, k)).collect();

    let mut sets = DisjointSet::new(nodes.len());
    for m in measurements {
        let (i, j) = m.pair;
        for &(a, b) in &m.inliers.matches {
            sets.union(index[&(i, a)], index[&(j, b)]);
        }
    }

    let mut groups: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
    for (k, &node) in nodes.iter().enumerate() {
        groups.entry(sets.find(k)).or_default().push(node);
    }
    let mut tracks: Vec<Track2D> = groups
        .into_values()
        .filter_map(|mut members| {
            members.sort_unstable();
            if members.windows(2).any(|w| w[0].0 == w[1].0) {
                return None;
            }
            Some(Track2D {
                observations: members
                    .into_iter()
                    .map(|(image_id, keypoint)| TrackObservation {
                        image_id,
                        keypoint,
                        position: keypoints[image_id][keypoint].position,
                    })
                    .collect(),
            })
        })
        .filter(|t| t.len() >= 2)
        .collect();
    tracks.sort_by(|a, b| {
        let key = |t: &Track2D| (t.observations[0].image_id, t.observations[0].keypoint);
        key(a).cmp(&key(b))
    });
    tracks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriangulationConfig {
    pub min_track_length: usize,
    pub max_hypotheses: usize,
    pub reproj_threshold_px: f64,
    pub min_triangulation_angle_rad: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            min_track_length: 3,
            max_hypotheses: 100,
            reproj_threshold_px: 10.0,
            min_triangulation_angle_rad: 1e-3,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriangulationError {
    #[error("track has {found} usable views, need {needed}")]
    TrackTooShort { found: usize, needed: usize },
    #[error("rays are nearly parallel (max angle {max_angle_rad:e} rad)")]
    Degenerate { max_angle_rad: f64 },
    #[error("triangulated point is behind camera {image_id}")]
    BehindCamera { image_id: usize },
}

struct View {
    image_id: usize,
    projection: Matrix3x4<f64>,
    normalized: Vector2<f64>,
    observed: Vector2<f64>,
    pose: Pose3,
    intr: CameraIntrinsics,
}

impl View {
    fn reprojection_error(&self, point: &Vector3<f64>) -> Option<f64> {
        let p_cam = self.pose.inverse_transform_point(point);
        let px = self.intr.project_camera_point(&p_cam).ok()?;
        Some((px - self.observed).norm())
    }
}

/// RANSAC over two-view DLT hypotheses followed by a DLT over all inliers.
///
/// `poses[i]` is `None` for cameras that were not registered; their
/// observations are ignored. `seed` should already be specific to the track.
pub fn triangulate_ransac_dlt(
    track: &Track2D,
    poses: &[Option<Pose3>],
    intrinsics: &[CameraIntrinsics],
    cfg: &TriangulationConfig,
    seed: u64,
) -> Result<Landmark, TriangulationError> {
    let needed = cfg.min_track_length.max(2);
    let views: Vec<(usize, View)> = track
        .observations
        .iter()
        .enumerate()
        .filter_map(|(k, o)| {
            let pose = poses.get(o.image_id).copied().flatten()?;
            let intr = intrinsics[o.image_id];
            Some((
                k,
                View {
                    image_id: o.image_id,
                    projection: world_to_camera(&pose),
                    normalized: intr.pixel_to_normalized(&o.position),
                    observed: o.position,
                    pose,
                    intr,
                },
            ))
        })
        .collect();
    if views.len() < needed {
        return Err(TriangulationError::TrackTooShort {
            found: views.len(),
            needed,
        });
    }

    let m = views.len();
    let all_pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| ((a + 1)..m).map(move |b| (a, b)))
        .collect();
    let hypotheses: Vec<(usize, usize)> = if all_pairs.len() <= cfg.max_hypotheses {
        all_pairs
    } else {
        let mut rng = task_rng(seed, &[]);
        let mut picked: Vec<usize> = sample(&mut rng, all_pairs.len(), cfg.max_hypotheses).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|k| all_pairs[k]).collect()
    };

    let threshold = cfg.reproj_threshold_px;
    let inliers_of = |point: &Vector3<f64>| -> (Vec<bool>, f64) {
        let mut total = 0.0;
        let mask = views
            .iter()
            .map(|(_, v)| match v.reprojection_error(point) {
                Some(e) if e <= threshold => {
                    total += e;
                    true
                }
                _ => false,
            })
            .collect();
        (mask, total)
    };

    let mut best: Option<(usize, f64, Vec<bool>)> = None;
    for &(a, b) in &hypotheses {
        let (va, vb) = (&views[a].1, &views[b].1);
        let Some(point) = dlt(&[(va.projection, va.normalized), (vb.projection, vb.normalized)])
        else {
            continue;
        };
        let (mask, err) = inliers_of(&point);
        let count = mask.iter().filter(|&&x| x).count();
        let better = match &best {
            None => true,
            Some((c, e, _)) => count > *c || (count == *c && err < *e),
        };
        if better {
            best = Some((count, err, mask));
        }
    }
    let Some((count, _, mask)) = best else {
        return Err(TriangulationError::TrackTooShort { found: 0, needed });
    };
    if count < needed {
        return Err(TriangulationError::TrackTooShort { found: count, needed });
    }

    let inlier_views: Vec<&View> = views
        .iter()
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .map(|((_, v), _)| v)
        .collect();
    let rows: Vec<_> = inlier_views
        .iter()
        .map(|v| (v.projection, v.normalized))
        .collect();
    let point = dlt(&rows).ok_or(TriangulationError::Degenerate { max_angle_rad: 0.0 })?;

    for v in &inlier_views {
        if v.pose.inverse_transform_point(&point).z <= 1e-9 {
            return Err(TriangulationError::BehindCamera {
                image_id: v.image_id,
            });
        }
    }
    let mut max_angle: f64 = 0.0;
    for (a, va) in inlier_views.iter().enumerate() {
        for vb in &inlier_views[a + 1..] {
            max_angle = max_angle.max(ray_angle(&va.pose.translation, &vb.pose.translation, &point));
        }
    }
    if max_angle < cfg.min_triangulation_angle_rad {
        return Err(TriangulationError::Degenerate {
            max_angle_rad: max_angle,
        });
    }

    // Final mask is evaluated at the refined point so every reported inlier
    // is within the threshold.
    let (final_mask, total) = inliers_of(&point);
    let n_final = final_mask.iter().filter(|&&x| x).count();
    if n_final < needed {
        return Err(TriangulationError::TrackTooShort {
            found: n_final,
            needed,
        });
    }
    let mut inlier_mask = vec![false; track.len()];
    for ((k, _), keep) in views.iter().zip(&final_mask) {
        inlier_mask[*k] = *keep;
    }
    Ok(Landmark {
        track: track.clone(),
        point,
        inlier_mask,
        mean_reprojection_error_px: total / n_final as f64,
    })
}

/// Triangulates every track on the executor; per-track seeds come from
/// `(global_seed, track index)`.
pub fn triangulate_tracks(
    tracks: &[Track2D],
    poses: &[Option<Pose3>],
    intrinsics: &[CameraIntrinsics],
    cfg: &TriangulationConfig,
    global_seed: u64,
    executor: &Executor,
) -> Vec<Result<Landmark, TriangulationError>> {
    executor.map(tracks, |k, track| {
        let seed = crate::seed::task_seed(global_seed, &[k as u64]);
        triangulate_ransac_dlt(track, poses, intrinsics, cfg, seed)
    })
}
