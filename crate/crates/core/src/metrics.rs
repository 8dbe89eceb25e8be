//! Accuracy metrics against ground truth: relative and Sim(3)-aligned global
//! pose errors, Global Pose AUC and track statistics. All angles in degrees.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_assoc::Landmark;
use crate::geom::{direction_angular_error, rotation_angular_error, sim3_align, Pose3, Sim3};

pub const DEFAULT_AUC_THRESHOLDS_DEG: [f64; 5] = [1.0, 2.5, 5.0, 10.0, 20.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("camera {camera} has no pose")]
    MissingPose { camera: usize },
    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),
}

/// Summary of a sample of values plus the raw samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub samples: Vec<f64>,
}

impl Distribution {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        Self {
            count: n,
            min: Some(sorted[0]),
            max: Some(sorted[n - 1]),
            mean: Some(sorted.iter().sum::<f64>() / n as f64),
            median: Some(median),
            samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativePoseError {
    pub pair: (usize, usize),
    pub rotation_deg: f64,
    pub translation_deg: f64,
    pub pose_deg: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelativeErrors {
    pub errors: Vec<RelativePoseError>,
    /// Pairs whose ground-truth or estimated baseline is zero, so the
    /// translation direction is undefined.
    pub skipped_zero_baseline: Vec<(usize, usize)>,
}

fn relative_direction(pose_i: &Pose3, pose_j: &Pose3) -> nalgebra::Vector3<f64> {
    Pose3::relative(pose_i, pose_j).translation
}

/// Relative rotation and translation-direction errors per pair; the pose
/// error is the larger of the two.
pub fn relative_pose_errors(
    estimated: &[Option<Pose3>],
    ground_truth: &[Pose3],
    pairs: &[(usize, usize)],
) -> Result<RelativeErrors, MetricsError> {
    let get = |k: usize| -> Result<(Pose3, Pose3), MetricsError> {
        let est = estimated.get(k).copied().flatten();
        match (est, ground_truth.get(k)) {
            (Some(e), Some(g)) => Ok((e, *g)),
            _ => Err(MetricsError::MissingPose { camera: k }),
        }
    };
    let mut out = RelativeErrors::default();
    for &(i, j) in pairs {
        let (ei, gi) = get(i)?;
        let (ej, gj) = get(j)?;
        let rotation_deg = rotation_angular_error(
            &Pose3::relative(&ei, &ej).rotation,
            &Pose3::relative(&gi, &gj).rotation,
        );
        match direction_angular_error(&relative_direction(&ei, &ej), &relative_direction(&gi, &gj)) {
            Ok(translation_deg) => out.errors.push(RelativePoseError {
                pair: (i, j),
                rotation_deg,
                translation_deg,
                pose_deg: rotation_deg.max(translation_deg),
            }),
            Err(_) => out.skipped_zero_baseline.push((i, j)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalCameraError {
    pub camera: usize,
    pub rotation_deg: f64,
    /// Angle between the aligned and reference position vectors; `None` when
    /// either position is at the origin.
    pub translation_deg: Option<f64>,
}

impl GlobalCameraError {
    /// `max(rotation, translation)`, rotation alone when translation is
    /// undefined.
    pub fn pose_deg(&self) -> f64 {
        self.translation_deg.map_or(self.rotation_deg, |t| t.max(self.rotation_deg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalErrors {
    pub alignment: Sim3,
    /// Registered cameras only.
    pub cameras: Vec<GlobalCameraError>,
    pub n_unregistered: usize,
}

/// Aligns the registered estimates onto the ground truth, then compares
/// rotations and position vectors camera by camera.
pub fn global_pose_errors(estimated: &[Option<Pose3>], ground_truth: &[Pose3]) -> Result<GlobalErrors, MetricsError> {
    let registered: Vec<usize> = (0..ground_truth.len())
        .filter(|&k| estimated.get(k).is_some_and(|p| p.is_some()))
        .collect();
    let est: Vec<Pose3> = registered.iter().map(|&k| estimated[k].expect("registered")).collect();
    let gt: Vec<Pose3> = registered.iter().map(|&k| ground_truth[k]).collect();
    let alignment = sim3_align(&est, &gt).map_err(|e| MetricsError::DegenerateAlignment(e.to_string()))?;
    let cameras = registered
        .iter()
        .zip(est.iter().zip(&gt))
        .map(|(&camera, (e, g))| {
            let aligned = alignment.transform_pose(e);
            GlobalCameraError {
                camera,
                rotation_deg: rotation_angular_error(&aligned.rotation, &g.rotation),
                translation_deg: direction_angular_error(&aligned.translation, &g.translation).ok(),
            }
        })
        .collect();
    Ok(GlobalErrors {
        alignment,
        cameras,
        n_unregistered: ground_truth.len() - registered.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucEntry {
    pub threshold_deg: f64,
    pub auc_percent: f64,
}

/// Area under the recall curve up to each threshold, as a percentage.
///
/// Recall counts every camera, so unregistered cameras (and non-finite
/// errors) act as infinite errors. With cumulative recall a step function,
/// the integral is exactly `sum_i max(0, t - e_i) / (N t)`.
pub fn pose_auc(pose_errors_deg: &[f64], unregistered: usize, thresholds_deg: &[f64]) -> Vec<AucEntry> {
    let n = pose_errors_deg.len() + unregistered;
    thresholds_deg
        .iter()
        .map(|&t| {
            let area: f64 = pose_errors_deg
                .iter()
                .filter(|e| e.is_finite())
                .map(|&e| (t - e.max(0.0)).max(0.0))
                .sum();
            AucEntry {
                threshold_deg: t,
                auc_percent: if n == 0 { 0.0 } else { 100.0 * area / (n as f64 * t) },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackStatistics {
    pub n_tracks: usize,
    /// Inlier observation counts.
    pub length: Distribution,
    /// Mean over tracks of the per-track mean error; `None` without tracks.
    pub mean_reprojection_error_px: Option<f64>,
}

pub fn track_statistics(landmarks: &[Landmark]) -> TrackStatistics {
    let n = landmarks.len();
    TrackStatistics {
        n_tracks: n,
        length: Distribution::from_samples(landmarks.iter().map(|l| l.n_inliers() as f64).collect()),
        mean_reprojection_error_px: (n > 0)
            .then(|| landmarks.iter().map(|l| l.mean_reprojection_error_px).sum::<f64>() / n as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_cameras: usize,
    pub n_registered_cameras: usize,
    pub relative_rotation_error_deg: Distribution,
    pub relative_translation_error_deg: Distribution,
    pub relative_pose_error_deg: Distribution,
    pub n_relative_pairs_zero_baseline: usize,
    pub global_rotation_error_deg: Distribution,
    pub global_translation_error_deg: Distribution,
    pub global_pose_error_deg: Distribution,
    pub pose_auc: Vec<AucEntry>,
    pub n_tracks_filtered: usize,
    pub track_length: Distribution,
    pub track_mean_reprojection_error_px: Option<f64>,
}

impl MetricsReport {
    pub fn auc_at(&self, threshold_deg: f64) -> Option<f64> {
        self.pose_auc
            .iter()
            .find(|e| (e.threshold_deg - threshold_deg).abs() < 1e-12)
            .map(|e| e.auc_percent)
    }
}

/// Full report; relative errors are taken over all pairs of registered
/// cameras.
pub fn evaluate(
    estimated: &[Option<Pose3>],
    ground_truth: &[Pose3],
    landmarks: &[Landmark],
    thresholds_deg: &[f64],
) -> Result<MetricsReport, MetricsError> {
    let registered: Vec<usize> = (0..ground_truth.len())
        .filter(|&k| estimated.get(k).is_some_and(|p| p.is_some()))
        .collect();
    let pairs: Vec<(usize, usize)> = registered
        .iter()
        .enumerate()
        .flat_map(|(a, &i)| registered[a + 1..].iter().map(move |&j| (i, j)))
        .collect();
    let rel = relative_pose_errors(estimated, ground_truth, &pairs)?;
    let global = global_pose_errors(estimated, ground_truth)?;
    let pose_errors: Vec<f64> = global.cameras.iter().map(GlobalCameraError::pose_deg).collect();
    let tracks = track_statistics(landmarks);
    Ok(MetricsReport {
        n_cameras: ground_truth.len(),
        n_registered_cameras: registered.len(),
        relative_rotation_error_deg: Distribution::from_samples(rel.errors.iter().map(|e| e.rotation_deg).collect()),
        relative_translation_error_deg: Distribution::from_samples(
            rel.errors.iter().map(|e| e.translation_deg).collect(),
        ),
        relative_pose_error_deg: Distribution::from_samples(rel.errors.iter().map(|e| e.pose_deg).collect()),
        n_relative_pairs_zero_baseline: rel.skipped_zero_baseline.len(),
        global_rotation_error_deg: Distribution::from_samples(global.cameras.iter().map(|c| c.rotation_deg).collect()),
        global_translation_error_deg: Distribution::from_samples(
            global.cameras.iter().filter_map(|c| c.translation_deg).collect(),
        ),
        global_pose_error_deg: Distribution::from_samples(pose_errors.clone()),
        pose_auc: pose_auc(&pose_errors, global.n_unregistered, thresholds_deg),
        n_tracks_filtered: tracks.n_tracks,
        track_length: tracks.length,
        track_mean_reprojection_error_px: tracks.mean_reprojection_error_px,
    })
}
