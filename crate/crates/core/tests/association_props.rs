use std::collections::BTreeSet;

use gsfm::data_assoc::{build_tracks, triangulate_tracks, Track2D, TriangulationConfig};
use gsfm::executor::Executor;
use gsfm::geom::{Pose3, UnitVector3};
use gsfm::synth::{generate_orbit_scene, SceneConfig};
use gsfm::trans_avg::{mfas_filter, solve_translations, translation_cost, DirectionMeasurement, Endpoint, TranslationConfig};
use gsfm::triangulate::{dlt, world_to_camera};
use gsfm::two_view::TwoViewMeasurement;
use nalgebra::Vector3;
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

/// Cameras on a wobbly ring around landmarks near the origin.
fn layout() -> impl Strategy<Value = (Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    (5..12usize, 2..6usize).prop_flat_map(|(n_cam, n_lm)| {
        (
            prop::collection::vec((-0.1..0.1f64, -0.5..0.5f64, 4.0..6.0f64), n_cam).prop_map(move |jitter| {
                jitter
                    .iter()
                    .enumerate()
                    .map(|(k, &(da, h, r))| {
                        let a = (k as f64 + da) / n_cam as f64 * std::f64::consts::TAU;
                        Vector3::new(r * a.cos(), h, r * a.sin())
                    })
                    .collect()
            }),
            prop::collection::vec(vec3(1.0), n_lm),
        )
    })
}

fn unit(v: Vector3<f64>) -> UnitVector3 {
    UnitVector3::new_normalize(v).unwrap()
}

fn exact_measurements(cams: &[Vector3<f64>], lms: &[Vector3<f64>]) -> Vec<DirectionMeasurement> {
    let mut out = Vec::new();
    for i in 0..cams.len() {
        for j in i + 1..cams.len() {
            out.push(DirectionMeasurement::camera(i, j, unit(cams[j] - cams[i])));
        }
        for (l, p) in lms.iter().enumerate() {
            out.push(DirectionMeasurement::landmark(i, l, unit(p - cams[i])));
        }
    }
    out
}

fn measurements_from_scene(seed: u64, n_cameras: usize, n_points: usize) -> (Vec<TwoViewMeasurement>, Vec<Vec<gsfm::two_view::Keypoint>>) {
    let out = generate_orbit_scene(&SceneConfig {
        n_cameras,
        n_points,
        seed,
        ..Default::default()
    })
    .unwrap();
    let ms = out
        .matches
        .iter()
        .map(|m| {
            let (i, j) = m.pair;
            let rel = Pose3::relative(&out.scene.poses[i], &out.scene.poses[j]);
            TwoViewMeasurement {
                pair: m.pair,
                rotation: rel.rotation,
                direction: unit(rel.translation),
                inliers: m.clone(),
                inlier_ratio: 1.0,
                n_inliers: m.len(),
            }
        })
        .collect();
    (ms, out.keypoints)
}

fn track_set(tracks: &[Track2D]) -> BTreeSet<Vec<(usize, usize)>> {
    tracks
        .iter()
        .map(|t| {
            let mut obs: Vec<(usize, usize)> = t.observations.iter().map(|o| (o.image_id, o.keypoint)).collect();
            obs.sort();
            obs
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn translation_cost_ignores_shift_and_scale(
        (cams, lms) in layout(),
        noise in prop::collection::vec(vec3(0.1), 1..20),
        shift in vec3(10.0),
        scale in 0.05..20.0f64,
        huber in prop::option::of(0.01..1.0f64),
    ) {
        let ms: Vec<DirectionMeasurement> = exact_measurements(&cams, &lms)
            .into_iter()
            .zip(noise.iter().cycle())
            .map(|(m, n)| DirectionMeasurement { direction: unit(m.direction.into_inner() + n), ..m })
            .collect();
        let moved = |v: &[Vector3<f64>]| v.iter().map(|p| p * scale + shift).collect::<Vec<_>>();
        let a = translation_cost(&ms, &cams, &lms, huber);
        let b = translation_cost(&ms, &moved(&cams), &moved(&lms), huber);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn mfas_keeps_every_exact_measurement((cams, lms) in layout(), seed in any::<u64>()) {
        let ms = exact_measurements(&cams, &lms);
        let cfg = TranslationConfig::default();
        let result = mfas_filter(&ms, cfg.n_projections, cfg.mfas_threshold, seed, &Executor::new(1));
        prop_assert!(result.inliers.iter().all(|&k| k));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn exact_landmark_rays_are_reproduced((cams, lms) in layout(), seed in any::<u64>()) {
        let ms = exact_measurements(&cams, &lms);
        let sol = solve_translations(&ms, &TranslationConfig::default(), seed).unwrap();
        for m in &ms {
            if let Endpoint::Landmark(l) = m.to {
                let d = (sol.landmark_positions[l] - sol.positions[m.from]).normalize();
                prop_assert!((d - m.direction.as_ref()).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn tracks_do_not_depend_on_measurement_order(seed in 0..1000u64, order_seed in any::<u64>()) {
        let (ms, keypoints) = measurements_from_scene(seed, 6, 60);
        let reference = build_tracks(&ms, &keypoints);
        let mut shuffled = ms.clone();
        let mut state = order_seed | 1;
        for k in (1..shuffled.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            shuffled.swap(k, (state % (k as u64 + 1)) as usize);
        }
        let permuted = build_tracks(&shuffled, &keypoints);
        prop_assert_eq!(track_set(&reference), track_set(&permuted));
        for t in &reference {
            let images: BTreeSet<usize> = t.observations.iter().map(|o| o.image_id).collect();
            prop_assert!(t.len() >= 2);
            prop_assert_eq!(images.len(), t.len());
        }
    }

    #[test]
    fn landmarks_reproject_within_threshold(seed in 0..1000u64, noise in prop_oneof![Just(0.0), 0.0..3.0f64]) {
        let out = generate_orbit_scene(&SceneConfig { n_cameras: 6, n_points: 60, noise_px: noise, seed, ..Default::default() }).unwrap();
        let ms: Vec<TwoViewMeasurement> = out
            .matches
            .iter()
            .map(|m| TwoViewMeasurement {
                pair: m.pair,
                rotation: gsfm::geom::Rotation3::identity(),
                direction: unit(Vector3::x()),
                inliers: m.clone(),
                inlier_ratio: 1.0,
                n_inliers: m.len(),
            })
            .collect();
        let tracks = build_tracks(&ms, &out.keypoints);
        let poses: Vec<Option<Pose3>> = out.scene.poses.iter().copied().map(Some).collect();
        let intr = out.intrinsics();
        let cfg = TriangulationConfig::default();
        for lm in triangulate_tracks(&tracks, &poses, &intr, &cfg, seed, &Executor::new(1)).into_iter().flatten() {
            prop_assert!(lm.point.iter().all(|v| v.is_finite()));
            prop_assert!(lm.n_inliers() >= cfg.min_track_length);
            for o in lm.inlier_observations() {
                let pose = poses[o.image_id].unwrap();
                let px = intr[o.image_id].project_camera_point(&pose.inverse_transform_point(&lm.point)).unwrap();
                prop_assert!((px - o.position).norm() <= cfg.reproj_threshold_px);
            }
            if noise == 0.0 {
                let views: Vec<_> = lm
                    .track
                    .observations
                    .iter()
                    .map(|o| (world_to_camera(&poses[o.image_id].unwrap()), intr[o.image_id].pixel_to_normalized(&o.position)))
                    .collect();
                prop_assert!((dlt(&views).unwrap() - lm.point).norm() < 1e-9);
            }
        }
    }
}
