//! Merging of near-duplicate keypoints produced by dense matchers.

use std::collections::HashMap;

use nalgebra::Vector2;

use super::{Keypoint, MatchSet};
use crate::data_assoc::DisjointSet;

/// Cluster id per keypoint; keypoints closer than `radius` share a cluster
/// (transitively). Clusters are numbered by their lowest member index.
fn cluster(points: &[Vector2<f64>], radius: f64) -> (Vec<usize>, usize) {
    let cell = |p: &Vector2<f64>| ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (k, p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(k);
    }
    let mut sets = DisjointSet::new(points.len());
    for (k, p) in points.iter().enumerate() {
        let (cx, cy) = cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = grid.get(&(cx + dx, cy + dy)) {
                    for &other in bucket {
                        if other > k && (points[other] - p).norm() < radius {
                            sets.union(k, other);
                        }
                    }
                }
            }
        }
    }
    let mut ids = vec![usize::MAX; points.len()];
    let mut root_to_id = HashMap::new();
    let mut next = 0;
    for k in 0..points.len() {
        let root = sets.find(k);
        let id = *root_to_id.entry(root).or_insert_with(|| {
            next += 1;
            next - 1
        });
        ids[k] = id;
    }
    (ids, next)
}

/// Merges keypoints within `radius_px` of each other (per image) into their
/// centroid, remaps every match and drops correspondences that collapse onto
/// the same endpoints.
pub fn merge_keypoints_nms(
    keypoints: &[Vec<Keypoint>],
    matches: &[MatchSet],
    radius_px: f64,
) -> (Vec<Vec<Keypoint>>, Vec<MatchSet>) {
    let mut remap = Vec::with_capacity(keypoints.len());
    let mut merged = Vec::with_capacity(keypoints.len());
    for kps in keypoints {
        let positions: Vec<Vector2<f64>> = kps.iter().map(|k| k.position).collect();
        let (ids, n_clusters) = cluster(&positions, radius_px);
        let mut sums = vec![(Vector2::zeros(), 0usize); n_clusters];
        for (k, &id) in ids.iter().enumerate() {
            sums[id].0 += positions[k];
            sums[id].1 += 1;
        }
        let mut out: Vec<Keypoint> = Vec::with_capacity(n_clusters);
        for (k, &id) in ids.iter().enumerate() {
            if id == out.len() {
                out.push(Keypoint {
                    image_id: kps[k].image_id,
                    position: sums[id].0 / sums[id].1 as f64,
                    detection_id: kps[k].detection_id,
                });
            }
        }
        merged.push(out);
        remap.push(ids);
    }
    let matches = matches
        .iter()
        .map(|m| {
            let (i, j) = m.pair;
            let mut out = MatchSet::new(
                m.pair,
                m.matches
                    .iter()
                    .map(|&(a, b)| (remap[i][a], remap[j][b]))
                    .collect(),
            );
            out.dedup();
            out
        })
        .collect();
    (merged, matches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn close_pair_merges() {
        let kps = vec![
            vec![Keypoint::new(0, 10.0, 10.0), Keypoint::new(0, 11.0, 10.0)],
            vec![Keypoint::new(1, 50.0, 50.0)],
        ];
        let matches = vec![MatchSet::new((0, 1), vec![(0, 0), (1, 0)])];
        let (kp, m) = merge_keypoints_nms(&kps, &matches, 3.0);
        assert_eq!(kp[0].len(), 1);
        assert_eq!(kp[0][0].position, Vector2::new(10.5, 10.0));
        assert_eq!(m[0].matches, vec![(0, 0)]);
    }

    #[test]
    fn distant_pair_unchanged() {
        let kps = vec![
            vec![Keypoint::new(0, 10.0, 10.0), Keypoint::new(0, 20.0, 10.0)],
            vec![Keypoint::new(1, 0.0, 0.0), Keypoint::new(1, 30.0, 0.0)],
        ];
        let matches = vec![MatchSet::new((0, 1), vec![(0, 0), (1, 1)])];
        let (kp, m) = merge_keypoints_nms(&kps, &matches, 3.0);
        assert_eq!(kp, kps);
        assert_eq!(m, matches);
    }

    #[test]
    fn matches_agree_with_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let mut img0 = Vec::new();
            for _ in 0..5 {
                img0.push(Keypoint::new(
                    0,
                    100.0 + rng.random_range(-1.0..1.0),
                    100.0 + rng.random_range(-1.0..1.0),
                ));
            }
            for _ in 0..15 {
                img0.push(Keypoint::new(
                    0,
                    rng.random_range(0.0..400.0),
                    rng.random_range(0.0..400.0),
                ));
            }
            let img1: Vec<Keypoint> = (0..20)
                .map(|_| Keypoint::new(1, rng.random_range(0.0..400.0), rng.random_range(0.0..400.0)))
                .collect();
            let raw: Vec<(usize, usize)> = (0..40)
                .map(|_| (rng.random_range(0..20), rng.random_range(0..20)))
                .collect();
            let matches = vec![MatchSet::new((0, 1), raw.clone())];
            let (_, out) = merge_keypoints_nms(&[img0.clone(), img1.clone()], &matches, 3.0);

            // Oracle: brute-force transitive closure of "closer than r".
            let label = |pts: &[Keypoint]| {
                let n = pts.len();
                let mut lab: Vec<usize> = (0..n).collect();
                loop {
                    let mut changed = false;
                    for a in 0..n {
                        for b in 0..n {
                            if (pts[a].position - pts[b].position).norm() < 3.0 && lab[b] < lab[a] {
                                lab[a] = lab[b];
                                changed = true;
                            }
                        }
                    }
                    if !changed {
                        break lab;
                    }
                }
            };
            let (l0, l1) = (label(&img0), label(&img1));
            let mut expected: Vec<(usize, usize)> = Vec::new();
            for &(a, b) in &raw {
                let key = (l0[a], l1[b]);
                if !expected.contains(&key) {
                    expected.push(key);
                }
            }
            assert_eq!(out[0].matches.len(), expected.len());
        }
    }
}
