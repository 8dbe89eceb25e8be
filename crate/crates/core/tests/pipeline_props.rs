use gsfm::executor::Executor;
use gsfm::pipeline::{run_on_input, synthetic_input, PipelineConfig};
use gsfm::retrieval::{blocked_similarity, select_similarity_pairs, sequential_pairs, GlobalDescriptor};
use gsfm::synth::{generate_orbit_scene, SceneConfig};
use gsfm::two_view::{estimate_essential_ransac, VerificationConfig};
use proptest::prelude::*;

fn descriptors() -> impl Strategy<Value = Vec<GlobalDescriptor>> {
    (2..30usize, 1..16usize).prop_flat_map(|(n, dim)| {
        prop::collection::vec(prop::collection::vec(-1.0..1.0f32, dim), n).prop_filter_map("zero descriptor", |vs| {
            vs.into_iter()
                .enumerate()
                .map(|(k, v)| GlobalDescriptor::new(k, v).ok())
                .collect::<Option<Vec<_>>>()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn similarity_is_bitwise_block_invariant(descs in descriptors(), a in 1..40usize, b in 1..40usize, workers in 1..4usize) {
        let x = blocked_similarity(&descs, a, &Executor::new(1)).unwrap();
        let y = blocked_similarity(&descs, b, &Executor::new(workers)).unwrap();
        for i in 0..descs.len() {
            for j in 0..descs.len() {
                prop_assert_eq!(x.get(i, j).to_bits(), y.get(i, j).to_bits());
            }
        }
    }

    #[test]
    fn selected_pairs_clear_the_score_and_keep_best_partners(
        descs in descriptors(),
        k in 1..6usize,
        min_score in -1.0..1.0f64,
        lookahead in 1..12usize,
    ) {
        let n = descs.len();
        let sim = blocked_similarity(&descs, 8, &Executor::new(1)).unwrap();
        let chosen = select_similarity_pairs(&sim, k, min_score);
        for (i, j) in chosen.pairs() {
            prop_assert!(i < j);
            prop_assert!(sim.get(i, j) >= min_score);
        }
        for i in 0..n {
            let best = (0..n).filter(|&j| j != i).max_by(|&a, &b| {
                sim.get(i, a).total_cmp(&sim.get(i, b)).then(b.cmp(&a))
            });
            if let Some(j) = best {
                if sim.get(i, j) >= min_score {
                    prop_assert!(chosen.contains(i, j));
                }
            }
        }
        let mut all = sequential_pairs(n, lookahead);
        all.merge(&chosen);
        let pairs = all.pairs();
        let mut dedup = pairs.clone();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), pairs.len());
        prop_assert!(pairs.len() <= n * (n - 1) / 2);
    }

    #[test]
    fn executor_results_do_not_depend_on_workers(items in prop::collection::vec(any::<u32>(), 0..200), workers in 1..9usize) {
        let f = |k: usize, v: &u32| (k as u64).wrapping_mul(0x9e37_79b9).wrapping_add(*v as u64);
        let one = Executor::new(1).map(&items, f);
        let many = Executor::new(workers).map(&items, f);
        prop_assert_eq!(one, many);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ransac_is_seed_deterministic(scene_seed in 0..200u64, seed in any::<u64>(), noise in 0.0..2.0f64) {
        let out = generate_orbit_scene(&SceneConfig { n_cameras: 4, n_points: 80, noise_px: noise, seed: scene_seed, ..Default::default() }).unwrap();
        let m = &out.matches[0];
        let (i, j) = m.pair;
        let intr = out.scene.intrinsics;
        let cfg = VerificationConfig::default();
        let a = estimate_essential_ransac(m, &out.keypoints[i], &out.keypoints[j], &intr, &intr, &cfg, seed);
        let b = estimate_essential_ransac(m, &out.keypoints[i], &out.keypoints[j], &intr, &intr, &cfg, seed);
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn pipeline_output_does_not_depend_on_workers(scene_seed in 0..100u64, seed in any::<u64>(), workers in 2..6usize) {
        let out = generate_orbit_scene(&SceneConfig { n_cameras: 8, n_points: 120, noise_px: 0.5, seed: scene_seed, ..Default::default() }).unwrap();
        let input = synthetic_input(&out);
        let mut cfg = PipelineConfig::for_synthetic(0.5);
        cfg.seed = seed;
        let a = run_on_input(&input, &cfg, &Executor::new(1)).unwrap();
        let b = run_on_input(&input, &cfg, &Executor::new(workers)).unwrap();
        prop_assert_eq!(&a.result.poses, &b.result.poses);
        prop_assert_eq!(&a.result.landmarks, &b.result.landmarks);
        prop_assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn config_round_trips_through_toml(
        seed in any::<u32>(),
        workers in 1..16usize,
        k in prop::option::of(1..30usize),
        sigma in 1e-3..10.0f64,
        cycle in 0.5..30.0f64,
        trans_huber in prop::option::of(1e-3..1.0f64),
        ba_huber in prop::option::of(0.1..10.0f64),
        thresholds in prop::collection::btree_set(1..400u32, 1..6),
        exhaustive in any::<bool>(),
    ) {
        let mut cfg = PipelineConfig { seed: seed as u64, n_workers: workers, ..Default::default() };
        cfg.retrieval.k = k;
        cfg.retrieval.exhaustive = exhaustive;
        cfg.rotation.sigma = sigma;
        cfg.view_graph.cycle_threshold_deg = cycle;
        cfg.translation.huber_delta = trans_huber;
        cfg.bundle_adjustment.huber_px = ba_huber;
        cfg.auc_thresholds_deg = thresholds.into_iter().map(|t| t as f64 / 10.0).collect();
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(cfg, back);
    }
}
