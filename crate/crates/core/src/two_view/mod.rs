//! Relative pose of one image pair: essential-matrix RANSAC, decomposition,
//! two-view bundle adjustment and the accept/reject rule.

pub mod ba;
pub mod five_point;
pub mod nms;
pub mod ransac;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{CameraIntrinsics, Rotation3, UnitVector3};

pub use ba::two_view_ba;
pub use nms::merge_keypoints_nms;
pub use ransac::{decompose_essential, estimate_essential_ransac, EssentialEstimate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwoViewError {
    #[error("too few correspondences ({found}, need {needed})")]
    TooFewMatches { found: usize, needed: usize },
    #[error("no essential matrix reached the minimum support")]
    NoModelFound,
    #[error("no pose candidate has a strict cheirality majority")]
    CheiralityAmbiguous,
    #[error("indeterminate linear system (condition number {condition:e})")]
    IndeterminateSystem { condition: f64 },
    #[error("pair rejected: {n_inliers} inliers at ratio {inlier_ratio:.3}")]
    Rejected { n_inliers: usize, inlier_ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub image_id: usize,
    pub position: Vector2<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_id: Option<u64>,
}

impl Keypoint {
    pub fn new(image_id: usize, x: f64, y: f64) -> Self {
        Self {
            image_id,
            position: Vector2::new(x, y),
            detection_id: None,
        }
    }
}

/// Correspondences of pair `(i, j)` as `(keypoint in i, keypoint in j)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSet {
    pub pair: (usize, usize),
    pub matches: Vec<(usize, usize)>,
}

impl MatchSet {
    pub fn new(pair: (usize, usize), matches: Vec<(usize, usize)>) -> Self {
        Self { pair, matches }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Subset selected by a boolean mask.
    pub fn select(&self, mask: &[bool]) -> MatchSet {
        MatchSet {
            pair: self.pair,
            matches: self
                .matches
                .iter()
                .zip(mask)
                .filter(|(_, &keep)| keep)
                .map(|(m, _)| *m)
                .collect(),
        }
    }

    /// Drops repeated index pairs, keeping the first occurrence.
    pub fn dedup(&mut self) {
        let mut seen = std::collections::HashSet::new();
        self.matches.retain(|m| seen.insert(*m));
    }
}

/// Relative pose of pair `(i, j)`: `X_j = R_ji X_i + s t_ji` with unit `t_ji`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoViewMeasurement {
    pub pair: (usize, usize),
    pub rotation: Rotation3,
    pub direction: UnitVector3,
    pub inliers: MatchSet,
    pub inlier_ratio: f64,
    pub n_inliers: usize,
}

impl TwoViewMeasurement {
    /// Same measurement stored as pair `(j, i)`.
    pub fn reversed(&self) -> TwoViewMeasurement {
        let r_ij = self.rotation.inverse();
        let t_ij = -(r_ij.rotate(self.direction.as_ref()));
        TwoViewMeasurement {
            pair: (self.pair.1, self.pair.0),
            rotation: r_ij,
            direction: UnitVector3::new_normalize(t_ij).expect("unit direction"),
            inliers: MatchSet::new(
                (self.pair.1, self.pair.0),
                self.inliers.matches.iter().map(|&(a, b)| (b, a)).collect(),
            ),
            inlier_ratio: self.inlier_ratio,
            n_inliers: self.n_inliers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    pub ransac_threshold_px: f64,
    pub ransac_confidence: f64,
    pub max_ransac_iters: usize,
    pub min_inlier_ratio: f64,
    pub min_inliers: usize,
    pub two_view_ba: bool,
    pub two_view_ba_reproj_prune_px: f64,
    pub two_view_ba_max_iters: usize,
    pub two_view_ba_huber_px: f64,
    pub max_condition_number: f64,
    pub nms_merge: bool,
    pub nms_radius_px: f64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            ransac_threshold_px: 4.0,
            ransac_confidence: 0.9999,
            max_ransac_iters: 10_000,
            min_inlier_ratio: 0.10,
            min_inliers: 15,
            two_view_ba: true,
            two_view_ba_reproj_prune_px: 0.5,
            two_view_ba_max_iters: 100,
            two_view_ba_huber_px: 1.345,
            max_condition_number: 1e12,
            nms_merge: false,
            nms_radius_px: 3.0,
        }
    }
}

impl VerificationConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("ransac_threshold_px", self.ransac_threshold_px),
            ("min_inlier_ratio", self.min_inlier_ratio),
            ("two_view_ba_reproj_prune_px", self.two_view_ba_reproj_prune_px),
            ("two_view_ba_huber_px", self.two_view_ba_huber_px),
            ("max_condition_number", self.max_condition_number),
            ("nms_radius_px", self.nms_radius_px),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0) {
            return Err("ransac_confidence must lie in (0, 1)".into());
        }
        if self.max_ransac_iters == 0 || self.min_inliers == 0 || self.two_view_ba_max_iters == 0 {
            return Err("iteration and inlier counts must be > 0".into());
        }
        Ok(())
    }
}

/// Inlier-ratio and absolute-count gate.
pub fn accept_pair(measurement: &TwoViewMeasurement, cfg: &VerificationConfig) -> bool {
    measurement.inlier_ratio >= cfg.min_inlier_ratio && measurement.n_inliers >= cfg.min_inliers
}

/// Undistorted normalized rays `[x, y, 1]` of matched keypoints.
pub(crate) fn match_rays(
    matches: &MatchSet,
    kp_i: &[Keypoint],
    kp_j: &[Keypoint],
    intr_i: &CameraIntrinsics,
    intr_j: &CameraIntrinsics,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    matches
        .matches
        .iter()
        .map(|&(a, b)| {
            (
                intr_i.pixel_to_ray(&kp_i[a].position),
                intr_j.pixel_to_ray(&kp_j[b].position),
            )
        })
        .unzip()
}

/// Full per-pair front-end geometry: RANSAC, decomposition, optional
/// two-view BA, then the acceptance gate.
pub fn verify_pair(
    matches: &MatchSet,
    kp_i: &[Keypoint],
    kp_j: &[Keypoint],
    intr_i: &CameraIntrinsics,
    intr_j: &CameraIntrinsics,
    cfg: &VerificationConfig,
    seed: u64,
) -> Result<TwoViewMeasurement, TwoViewError> {
    let estimate = estimate_essential_ransac(matches, kp_i, kp_j, intr_i, intr_j, cfg, seed)?;
    let inliers = matches.select(&estimate.inlier_mask);
    let (rotation, direction) =
        decompose_essential(&estimate.essential, &inliers, kp_i, kp_j, intr_i, intr_j)?;
    let n_inliers = inliers.len();
    let mut measurement = TwoViewMeasurement {
        pair: matches.pair,
        rotation,
        direction,
        inliers,
        inlier_ratio: n_inliers as f64 / matches.len() as f64,
        n_inliers,
    };
    if cfg.two_view_ba {
        measurement = two_view_ba(&measurement, matches.len(), kp_i, kp_j, intr_i, intr_j, cfg)?;
    }
    if !accept_pair(&measurement, cfg) {
        return Err(TwoViewError::Rejected {
            n_inliers: measurement.n_inliers,
            inlier_ratio: measurement.inlier_ratio,
        });
    }
    Ok(measurement)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn measurement(ratio: f64, n: usize) -> TwoViewMeasurement {
        TwoViewMeasurement {
            pair: (0, 1),
            rotation: Rotation3::identity(),
            direction: UnitVector3::new_normalize(Vector3::x()).unwrap(),
            inliers: MatchSet::new((0, 1), vec![]),
            inlier_ratio: ratio,
            n_inliers: n,
        }
    }

    #[test]
    fn acceptance_thresholds() {
        let cfg = VerificationConfig::default();
        assert!(accept_pair(&measurement(0.5, 100), &cfg));
        assert!(!accept_pair(&measurement(0.09, 200), &cfg));
        assert!(!accept_pair(&measurement(0.9, 14), &cfg));
        assert!(accept_pair(&measurement(0.10, 15), &cfg));
    }

    #[test]
    fn config_validation() {
        assert!(VerificationConfig::default().validate().is_ok());
        let bad = VerificationConfig {
            ransac_threshold_px: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
