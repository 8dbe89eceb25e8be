//! Synthetic orbit scenes with exact (or noise-controlled) correspondences:
//! a stand-in for a real front-end with known ground truth.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{project, CameraIntrinsics, Pose3, Rotation3};
use crate::retrieval::GlobalDescriptor;
use crate::seed::task_rng;
use crate::two_view::{Keypoint, MatchSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_cameras: usize,
    pub n_points: usize,
    pub radius: f64,
    /// Side of the cube, centered at the origin, that points are drawn from.
    pub cube_side: f64,
    pub noise_px: f64,
    pub n_rings: usize,
    /// Elevation of the outermost rings in degrees.
    pub ring_elevation_deg: f64,
    /// Probability of dropping an otherwise visible observation.
    pub dropout: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub focal_px: f64,
    pub descriptor_dim: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_cameras: 20,
            n_points: 500,
            radius: 5.0,
            cube_side: 2.0,
            noise_px: 0.0,
            n_rings: 2,
            ring_elevation_deg: 15.0,
            dropout: 0.0,
            image_width: 760.0,
            image_height: 570.0,
            focal_px: 600.0,
            descriptor_dim: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("camera {camera} sees only {n_visible} points")]
    DegenerateScene { camera: usize, n_visible: usize },
    #[error("invalid scene parameters: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub poses: Vec<Pose3>,
    pub points: Vec<Vector3<f64>>,
    pub intrinsics: CameraIntrinsics,
    /// `visibility[camera][point]`.
    pub visibility: Vec<Vec<bool>>,
    pub image_size: (f64, f64),
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticOutput {
    pub scene: SyntheticScene,
    /// Per image; `detection_id` holds the index of the observed point.
    pub keypoints: Vec<Vec<Keypoint>>,
    /// Every pair with shared visibility, `i < j`.
    pub matches: Vec<MatchSet>,
    pub descriptors: Vec<GlobalDescriptor>,
}

impl SyntheticOutput {
    pub fn intrinsics(&self) -> Vec<CameraIntrinsics> {
        vec![self.scene.intrinsics; self.scene.poses.len()]
    }
}

/// Camera at `center` looking at `target` with image y pointing down and
/// world z up.
pub fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Pose3 {
    let z = (target - center).normalize();
    let up = if z.cross(&Vector3::z()).norm() < 1e-6 { Vector3::x() } else { Vector3::z() };
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    Pose3::new(Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z])), center)
}

fn in_image(px: &Vector2<f64>, w: f64, h: f64) -> bool {
    px.x >= 0.0 && px.x < w && px.y >= 0.0 && px.y < h
}

/// Descriptor from random Fourier features of the viewing axis, so that the
/// inner product decays with the angle between optical axes.
fn view_descriptor(axis: &Vector3<f64>, features: &[(Vector3<f64>, f64)]) -> Vec<f32> {
    features
        .iter()
        .map(|(w, b)| (w.dot(axis) + b).cos() as f32)
        .collect()
}

pub fn generate_orbit_scene(cfg: &SceneConfig) -> Result<SyntheticOutput, SynthError> {
    if cfg.n_cameras < 3 || cfg.n_points < 10 {
        return Err(SynthError::InvalidConfig(format!(
            "need at least 3 cameras and 10 points, got {} and {}",
            cfg.n_cameras, cfg.n_points
        )));
    }
    let mut rng = task_rng(cfg.seed, &[0x5ce4e]);
    let n_rings = cfg.n_rings.clamp(1, cfg.n_cameras);
    let poses: Vec<Pose3> = (0..cfg.n_cameras)
        .map(|k| {
            let ring = k % n_rings;
            let slot = k / n_rings;
            let per_ring = cfg.n_cameras.div_ceil(n_rings);
            let elevation = if n_rings == 1 {
                0.0
            } else {
                cfg.ring_elevation_deg * (2.0 * ring as f64 / (n_rings - 1) as f64 - 1.0)
            };
            let jitter: f64 = rng.random_range(-0.2..0.2);
            let azimuth = std::f64::consts::TAU * (slot as f64 + 0.5 * ring as f64 + jitter) / per_ring as f64;
            let e = elevation.to_radians();
            let center = cfg.radius * Vector3::new(e.cos() * azimuth.cos(), e.cos() * azimuth.sin(), e.sin());
            let target = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            look_at(center, target)
        })
        .collect();

    let half = 0.5 * cfg.cube_side;
    let raw_points: Vec<Vector3<f64>> = (0..cfg.n_points)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-half..half)))
        .collect();
    let intrinsics = CameraIntrinsics::pinhole(cfg.focal_px, 0.5 * cfg.image_width, 0.5 * cfg.image_height);
    let (w, h) = (cfg.image_width, cfg.image_height);

    let raw_vis: Vec<Vec<bool>> = poses
        .iter()
        .map(|pose| {
            raw_points
                .iter()
                .map(|p| {
                    let visible = project(p, pose, &intrinsics).is_ok_and(|px| in_image(&px, w, h));
                    visible && !(cfg.dropout > 0.0 && rng.random_bool(cfg.dropout))
                })
                .collect()
        })
        .collect();
    let keep: Vec<usize> = (0..cfg.n_points)
        .filter(|&p| raw_vis.iter().filter(|v| v[p]).count() >= 2)
        .collect();
    let points: Vec<Vector3<f64>> = keep.iter().map(|&p| raw_points[p]).collect();
    let visibility: Vec<Vec<bool>> = raw_vis
        .iter()
        .map(|v| keep.iter().map(|&p| v[p]).collect())
        .collect();
    for (camera, v) in visibility.iter().enumerate() {
        let n_visible = v.iter().filter(|&&b| b).count();
        if n_visible < 8 {
            return Err(SynthError::DegenerateScene { camera, n_visible });
        }
    }

    let noise = Normal::new(0.0, cfg.noise_px.max(0.0)).expect("finite sigma");
    let mut keypoints = Vec::with_capacity(poses.len());
    // kp_of[camera][point] = keypoint index.
    let mut kp_of: Vec<Vec<Option<usize>>> = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let mut kps = Vec::new();
        let mut index = vec![None; points.len()];
        for (p, point) in points.iter().enumerate() {
            if !visibility[i][p] {
                continue;
            }
            let mut px = project(point, pose, &intrinsics).expect("visible");
            if cfg.noise_px > 0.0 {
                px += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            index[p] = Some(kps.len());
            kps.push(Keypoint {
                image_id: i,
                position: px,
                detection_id: Some(p as u64),
            });
        }
        keypoints.push(kps);
        kp_of.push(index);
    }

    let mut matches = Vec::new();
    for i in 0..poses.len() {
        for j in (i + 1)..poses.len() {
            let m: Vec<(usize, usize)> = (0..points.len())
                .filter_map(|p| Some((kp_of[i][p]?, kp_of[j][p]?)))
                .collect();
            if !m.is_empty() {
                matches.push(MatchSet::new((i, j), m));
            }
        }
    }

    let features: Vec<(Vector3<f64>, f64)> = (0..cfg.descriptor_dim)
        .map(|_| {
            let w = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng)) * 2.0;
            (w, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let descriptors = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let axis = pose.rotation.matrix().column(2).into_owned();
            GlobalDescriptor::new(i, view_descriptor(&axis, &features)).expect("nonzero descriptor")
        })
        .collect();

    Ok(SyntheticOutput {
        scene: SyntheticScene {
            poses,
            points,
            intrinsics,
            visibility,
            image_size: (w, h),
            seed: cfg.seed,
        },
        keypoints,
        matches,
        descriptors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMode {
    /// Geometrically consistent matches against a phantom copy of the second
    /// camera rotated about the scene center by 40 to 90 degrees.
    Doppelganger,
    /// Correspondences shuffled at random.
    Random,
}

#[derive(Debug, Clone)]
pub struct OutlierInjection {
    pub keypoints: Vec<Vec<Keypoint>>,
    pub matches: Vec<MatchSet>,
    /// `corrupted[k]` labels `matches[k]`.
    pub corrupted: Vec<bool>,
    /// Rotation applied to the phantom camera of each corrupted pair.
    pub phantom_rotations: Vec<Option<Rotation3>>,
}

/// Replaces the correspondences of `round(fraction * pairs)` randomly chosen
/// pairs. Doppelganger keypoints are appended to the second image of the pair.
pub fn inject_outlier_edges(
    scene: &SyntheticScene,
    keypoints: &[Vec<Keypoint>],
    matches: &[MatchSet],
    fraction: f64,
    mode: OutlierMode,
    noise_px: f64,
    seed: u64,
) -> OutlierInjection {
    let mut rng = task_rng(seed, &[0x0071e5]);
    let n_bad = ((fraction.clamp(0.0, 1.0) * matches.len() as f64).round() as usize).min(matches.len());
    let mut order: Vec<usize> = (0..matches.len()).collect();
    order.shuffle(&mut rng);
    let mut corrupted = vec![false; matches.len()];
    for &k in &order[..n_bad] {
        corrupted[k] = true;
    }

    let mut keypoints = keypoints.to_vec();
    let mut out = matches.to_vec();
    let mut phantom_rotations = vec![None; matches.len()];
    let noise = Normal::new(0.0, noise_px.max(0.0)).expect("finite sigma");
    let (w, h) = scene.image_size;
    for k in 0..matches.len() {
        if !corrupted[k] {
            continue;
        }
        let (i, j) = matches[k].pair;
        match mode {
            OutlierMode::Random => {
                let mut targets: Vec<usize> = (0..keypoints[j].len()).collect();
                targets.shuffle(&mut rng);
                out[k].matches = matches[k]
                    .matches
                    .iter()
                    .zip(targets.iter().cycle())
                    .map(|(&(a, _), &b)| (a, b))
                    .collect();
            }
            OutlierMode::Doppelganger => {
                let axis = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                let angle: f64 = rng.random_range(40f64..90.0).to_radians();
                let g = Rotation3::from_axis_angle(&axis, angle);
                let true_pose = scene.poses[j];
                let phantom = Pose3::new(g * true_pose.rotation, g.rotate(&true_pose.translation));
                phantom_rotations[k] = Some(g);
                let kp_i: std::collections::HashMap<u64, usize> = keypoints[i]
                    .iter()
                    .enumerate()
                    .filter_map(|(idx, kp)| Some((kp.detection_id?, idx)))
                    .collect();
                let mut new_matches = Vec::new();
                for (p, point) in scene.points.iter().enumerate() {
                    let Some(&a) = kp_i.get(&(p as u64)) else { continue };
                    let Ok(mut px) = project(point, &phantom, &scene.intrinsics) else { continue };
                    if !in_image(&px, w, h) {
                        continue;
                    }
                    if noise_px > 0.0 {
                        px += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                    }
                    new_matches.push((a, keypoints[j].len()));
                    keypoints[j].push(Keypoint {
                        image_id: j,
                        position: px,
                        detection_id: None,
                    });
                }
                out[k].matches = new_matches;
            }
        }
    }
    OutlierInjection {
        keypoints,
        matches: out,
        corrupted,
        phantom_rotations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::hat;

    fn small() -> SceneConfig {
        SceneConfig {
            n_cameras: 8,
            n_points: 120,
            ..Default::default()
        }
    }

    #[test]
    fn noise_free_matches_are_epipolar() {
        let out = generate_orbit_scene(&small()).unwrap();
        let intr = out.scene.intrinsics;
        for m in &out.matches {
            let (i, j) = m.pair;
            let rel = Pose3::relative(&out.scene.poses[i], &out.scene.poses[j]);
            let e = hat(&rel.translation) * rel.rotation.matrix();
            for &(a, b) in &m.matches {
                let xi = intr.pixel_to_ray(&out.keypoints[i][a].position);
                let xj = intr.pixel_to_ray(&out.keypoints[j][b].position);
                assert!((xj.transpose() * e * xi)[0].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn visibility_is_symmetric_and_points_shared() {
        let out = generate_orbit_scene(&small()).unwrap();
        let vis = &out.scene.visibility;
        for m in &out.matches {
            let (i, j) = m.pair;
            let shared = (0..out.scene.points.len()).filter(|&p| vis[i][p] && vis[j][p]).count();
            assert_eq!(m.len(), shared);
        }
        for p in 0..out.scene.points.len() {
            assert!(vis.iter().filter(|v| v[p]).count() >= 2);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_orbit_scene(&small()).unwrap();
        let b = generate_orbit_scene(&small()).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.keypoints, b.keypoints);
        assert_eq!(a.matches, b.matches);
        assert_eq!(a.descriptors, b.descriptors);
    }

    #[test]
    fn sparse_view_is_degenerate() {
        let cfg = SceneConfig {
            n_points: 12,
            dropout: 0.9,
            ..small()
        };
        assert!(matches!(generate_orbit_scene(&cfg), Err(SynthError::DegenerateScene { .. })));
    }

    #[test]
    fn descriptor_similarity_tracks_view_angle() {
        let out = generate_orbit_scene(&SceneConfig { n_cameras: 20, n_rings: 1, ..small() }).unwrap();
        let d = &out.descriptors;
        let sim = |a: usize, b: usize| -> f64 {
            d[a].vector.iter().zip(&d[b].vector).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
        };
        // Neighbors on the ring are more similar than opposite cameras.
        assert!(sim(0, 1) > sim(0, 10));
    }

    #[test]
    fn injection_labels_and_phantom_angle() {
        let out = generate_orbit_scene(&small()).unwrap();
        let none = inject_outlier_edges(&out.scene, &out.keypoints, &out.matches, 0.0, OutlierMode::Doppelganger, 0.0, 1);
        assert_eq!(none.matches, out.matches);
        assert!(none.corrupted.iter().all(|&c| !c));

        let inj = inject_outlier_edges(&out.scene, &out.keypoints, &out.matches, 0.1, OutlierMode::Doppelganger, 0.0, 1);
        let expected = (0.1 * out.matches.len() as f64).round() as usize;
        assert_eq!(inj.corrupted.iter().filter(|&&c| c).count(), expected);
        for (k, g) in inj.phantom_rotations.iter().enumerate() {
            assert_eq!(g.is_some(), inj.corrupted[k]);
            if let Some(g) = g {
                assert!(g.angle().to_degrees() >= 30.0);
            }
        }
    }
}
