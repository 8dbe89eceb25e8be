use gsfm::bundle_adjust::{filter_tracks, run_bundle_adjustment, BaCamera, BaConfig, BaProblem};
use gsfm::data_assoc::{Landmark, Track2D, TrackObservation};
use gsfm::executor::Executor;
use gsfm::geom::{Rotation3, Sim3};
use gsfm::synth::{generate_orbit_scene, SceneConfig};
use nalgebra::Vector3;
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

/// Noisy synthetic problem started from a perturbed ground truth.
fn problem(seed: u64, noise_px: f64, perturb: f64) -> BaProblem {
    let out = generate_orbit_scene(&SceneConfig {
        n_cameras: 6,
        n_points: 60,
        noise_px,
        seed,
        ..Default::default()
    })
    .unwrap();
    let scene = &out.scene;
    let mut obs: Vec<Vec<TrackObservation>> = vec![Vec::new(); scene.points.len()];
    for (i, kps) in out.keypoints.iter().enumerate() {
        for (k, kp) in kps.iter().enumerate() {
            if let Some(p) = kp.detection_id {
                obs[p as usize].push(TrackObservation {
                    image_id: i,
                    keypoint: k,
                    position: kp.position,
                });
            }
        }
    }
    let wiggle = |k: usize, axis: usize| perturb * (((k * 7 + axis * 13 + seed as usize) % 11) as f64 / 5.0 - 1.0);
    let cameras = scene
        .poses
        .iter()
        .enumerate()
        .map(|(k, &pose)| {
            let mut pose = pose;
            if k > 0 {
                let w = Vector3::new(wiggle(k, 0), wiggle(k, 1), wiggle(k, 2)) * 0.01;
                pose.rotation = pose.rotation * Rotation3::exp(&w);
                pose.translation += Vector3::new(wiggle(k, 3), wiggle(k, 4), wiggle(k, 5)) * 0.05;
            }
            Some(BaCamera {
                pose,
                intrinsics: scene.intrinsics,
                intrinsics_group: None,
            })
        })
        .collect();
    let landmarks = obs
        .into_iter()
        .zip(&scene.points)
        .enumerate()
        .filter(|(_, (o, _))| o.len() >= 3)
        .map(|(l, (observations, &point))| Landmark {
            inlier_mask: vec![true; observations.len()],
            track: Track2D { observations },
            point: point + Vector3::new(wiggle(l, 6), wiggle(l, 7), wiggle(l, 8)) * 0.02,
            mean_reprojection_error_px: 0.0,
        })
        .collect();
    BaProblem { cameras, landmarks }
}

fn transformed(p: &BaProblem, sim: &Sim3) -> BaProblem {
    let mut out = p.clone();
    for cam in out.cameras.iter_mut().flatten() {
        cam.pose = sim.transform_pose(&cam.pose);
    }
    for lm in &mut out.landmarks {
        lm.point = sim.transform_point(&lm.point);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn final_cost_ignores_a_similarity_of_the_start(
        seed in 0..500u64,
        axis in vec3(1.0),
        angle in 0.0..3.0f64,
        shift in vec3(5.0),
        scale in 0.2..5.0f64,
    ) {
        prop_assume!(axis.norm() > 1e-3);
        let p = problem(seed, 1.0, 1.0);
        let sim = Sim3::new(Rotation3::from_axis_angle(&axis, angle), shift, scale);
        let cfg = BaConfig::default();
        let exec = Executor::new(1);
        let (_, a) = run_bundle_adjustment(&p, &cfg, &exec).unwrap();
        let (_, b) = run_bundle_adjustment(&transformed(&p, &sim), &cfg, &exec).unwrap();
        prop_assert!((a.initial_cost - b.initial_cost).abs() < 1e-9 * a.initial_cost);
        prop_assert!(
            (a.final_cost - b.final_cost).abs() < 1e-9 * a.final_cost.max(1.0),
            "final costs {} vs {}", a.final_cost, b.final_cost
        );
    }

    #[test]
    fn round_never_increases_cost(seed in 0..500u64, noise in 0.0..3.0f64, perturb in 0.0..2.0f64) {
        let p = problem(seed, noise, perturb);
        let (refined, report) = run_bundle_adjustment(&p, &BaConfig::default(), &Executor::new(1)).unwrap();
        prop_assert!(report.final_cost <= report.initial_cost);
        prop_assert!(refined.cameras[0].unwrap().pose == p.cameras[0].unwrap().pose);
        let d0 = (p.cameras[1].unwrap().pose.translation - p.cameras[0].unwrap().pose.translation).norm();
        let d1 = (refined.cameras[1].unwrap().pose.translation - refined.cameras[0].unwrap().pose.translation).norm();
        prop_assert!((d0 - d1).abs() < 1e-9 * d0);
    }

    #[test]
    fn filtering_is_idempotent(seed in 0..500u64, noise in 0.0..5.0f64, threshold in 1.0..10.0f64, min_len in 2..5usize) {
        let p = problem(seed, noise, 1.0);
        if let Ok(once) = filter_tracks(&p, threshold, min_len) {
            let twice = filter_tracks(&once, threshold, min_len).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
