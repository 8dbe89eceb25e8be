//! Camera positions from world-frame translation directions: 1-D ordering
//! outlier rejection followed by a robust chordal solve.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::Executor;
use crate::geom::UnitVector3;
use crate::robust::Loss;
use crate::seed::task_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    Camera(usize),
    Landmark(usize),
}

/// World-frame unit direction from camera `from` toward `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionMeasurement {
    pub from: usize,
    pub to: Endpoint,
    pub direction: UnitVector3,
}

impl DirectionMeasurement {
    pub fn camera(from: usize, to: usize, direction: UnitVector3) -> Self {
        Self {
            from,
            to: Endpoint::Camera(to),
            direction,
        }
    }

    pub fn landmark(from: usize, landmark: usize, direction: UnitVector3) -> Self {
        Self {
            from,
            to: Endpoint::Landmark(landmark),
            direction,
        }
    }

    pub fn is_camera_camera(&self) -> bool {
        matches!(self.to, Endpoint::Camera(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslationConfig {
    pub n_projections: usize,
    /// Fraction of a measurement's projected weight that may violate the
    /// 1-D orderings before it is rejected.
    pub mfas_threshold: f64,
    /// Chordal Huber transition; `None` gives plain least squares.
    #[serde(with = "crate::robust::optional_scale")]
    pub huber_delta: Option<f64>,
    pub random_starts: usize,
    pub max_iters: usize,
    pub use_landmarks: bool,
    pub landmarks_per_camera: usize,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        Self {
            n_projections: 48,
            mfas_threshold: 0.1,
            huber_delta: Some(0.1),
            random_starts: 8,
            max_iters: 100,
            use_landmarks: true,
            landmarks_per_camera: 3,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransAvgError {
    #[error("no direction measurements")]
    Empty,
    #[error("camera {camera} is not connected to camera 0 by any measurement")]
    Disconnected { camera: usize },
    #[error("positions are not determined by the directions ({null_dims} null dimensions)")]
    Underconstrained { null_dims: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfasResult {
    pub inliers: Vec<bool>,
    /// Violated share of each measurement's projected weight, in `[0, 1]`.
    pub violation: Vec<f64>,
}

/// Node order along one axis by the greedy heuristic: the node with the
/// largest `(out + 1) / (in + 1)` weight ratio goes next. Nodes without
/// remaining incoming arcs take precedence, so acyclic inputs are ordered
/// without violations. Ties go to the lowest node index.
fn greedy_order(n_nodes: usize, arcs: &[(usize, usize, f64)]) -> Vec<usize> {
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    let mut w_in = vec![0.0; n_nodes];
    let mut w_out = vec![0.0; n_nodes];
    let mut n_in = vec![0usize; n_nodes];
    for (k, &(a, b, w)) in arcs.iter().enumerate() {
        incident[a].push(k);
        incident[b].push(k);
        w_out[a] += w;
        w_in[b] += w;
        n_in[b] += 1;
    }
    let mut removed = vec![false; n_nodes];
    let mut position = vec![0; n_nodes];
    for slot in 0..n_nodes {
        let mut best = usize::MAX;
        let mut best_score = (false, f64::NEG_INFINITY);
        for v in 0..n_nodes {
            if removed[v] {
                continue;
            }
            let score = (n_in[v] == 0, (w_out[v] + 1.0) / (w_in[v] + 1.0));
            if score > best_score {
                best_score = score;
                best = v;
            }
        }
        removed[best] = true;
        position[best] = slot;
        for &k in &incident[best] {
            let (a, b, w) = arcs[k];
            if a == best && !removed[b] {
                w_in[b] -= w;
                n_in[b] -= 1;
            } else if b == best && !removed[a] {
                w_out[a] -= w;
            }
        }
    }
    position
}

fn node_index(n_cameras: usize, e: Endpoint) -> usize {
    match e {
        Endpoint::Camera(c) => c,
        Endpoint::Landmark(l) => n_cameras + l,
    }
}

fn node_counts(measurements: &[DirectionMeasurement]) -> (usize, usize) {
    let mut n_cam = 0;
    let mut n_lm = 0;
    for m in measurements {
        n_cam = n_cam.max(m.from + 1);
        match m.to {
            Endpoint::Camera(c) => n_cam = n_cam.max(c + 1),
            Endpoint::Landmark(l) => n_lm = n_lm.max(l + 1),
        }
    }
    (n_cam, n_lm)
}

/// Scores every measurement by how often it points against the greedy 1-D
/// orderings along `n_projections` random axes; one task per axis.
pub fn mfas_filter(
    measurements: &[DirectionMeasurement],
    n_projections: usize,
    threshold: f64,
    seed: u64,
    executor: &Executor,
) -> MfasResult {
    let (n_cam, n_lm) = node_counts(measurements);
    let n_nodes = n_cam + n_lm;
    let per_axis: Vec<(Vec<f64>, Vec<f64>)> = executor.map_range(n_projections, |k| {
        let mut rng = task_rng(seed, &[k as u64]);
        let axis = random_unit(&mut rng);
        let mut arcs = Vec::with_capacity(measurements.len());
        let mut owner = Vec::with_capacity(measurements.len());
        let mut weight = vec![0.0; measurements.len()];
        for (idx, m) in measurements.iter().enumerate() {
            let w = axis.dot(m.direction.as_ref());
            weight[idx] = w.abs();
            if w.abs() < 1e-12 {
                continue;
            }
            let (a, b) = (m.from, node_index(n_cam, m.to));
            arcs.push(if w > 0.0 { (a, b, w) } else { (b, a, -w) });
            owner.push(idx);
        }
        let pos = greedy_order(n_nodes, &arcs);
        let mut violated = vec![0.0; measurements.len()];
        for (&(a, b, w), &idx) in arcs.iter().zip(&owner) {
            if pos[b] < pos[a] {
                violated[idx] = w;
            }
        }
        (violated, weight)
    });
    let mut viol = vec![0.0; measurements.len()];
    let mut total = vec![0.0; measurements.len()];
    for (v, w) in &per_axis {
        for k in 0..measurements.len() {
            viol[k] += v[k];
            total[k] += w[k];
        }
    }
    let violation: Vec<f64> = viol
        .iter()
        .zip(&total)
        .map(|(&v, &t)| if t > 0.0 { v / t } else { 0.0 })
        .collect();
    MfasResult {
        inliers: violation.iter().map(|&v| v <= threshold).collect(),
        violation,
    }
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationSolution {
    /// Camera centers; camera 0 at the origin, mean measured camera-camera
    /// baseline equal to one.
    pub positions: Vec<Vector3<f64>>,
    pub landmark_positions: Vec<Vector3<f64>>,
    pub cost: f64,
    pub iterations: usize,
}

struct Solver<'a> {
    measurements: &'a [DirectionMeasurement],
    n_cam: usize,
    n_nodes: usize,
    loss: Loss,
}

impl Solver<'_> {
    fn endpoints(&self, m: &DirectionMeasurement) -> (usize, usize) {
        (m.from, node_index(self.n_cam, m.to))
    }

    fn residual(&self, x: &[Vector3<f64>], m: &DirectionMeasurement) -> (Vector3<f64>, Vector3<f64>, f64) {
        let (a, b) = self.endpoints(m);
        let d = x[b] - x[a];
        let n = d.norm().max(1e-12);
        let u = d / n;
        (m.direction.as_ref() - u, u, n)
    }

    fn cost(&self, x: &[Vector3<f64>]) -> f64 {
        self.measurements
            .iter()
            .map(|m| self.loss.cost(self.residual(x, m).0.norm()))
            .sum()
    }

    /// Weighted Gauss-Newton system `(H, g)` over all node coordinates.
    fn normal_equations(&self, x: &[Vector3<f64>]) -> (DMatrix<f64>, DVector<f64>) {
        let dim = 3 * self.n_nodes;
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        for m in self.measurements {
            let (a, b) = self.endpoints(m);
            let (r, u, n) = self.residual(x, m);
            let w = self.loss.weight(r.norm());
            // dr/dx_b = -(I - u u^T) / n, dr/dx_a = -dr/dx_b.
            let jb = -(Matrix3::identity() - u * u.transpose()) / n;
            let jtj = jb.transpose() * jb * w;
            let jtr = jb.transpose() * r * w;
            for (p, sp) in [(a, -1.0), (b, 1.0)] {
                for (q, sq) in [(a, -1.0), (b, 1.0)] {
                    let mut blk = h.view_mut((3 * p, 3 * q), (3, 3));
                    blk += jtj * (sp * sq);
                }
                let mut gb = g.rows_mut(3 * p, 3);
                gb += jtr * sp;
            }
        }
        (h, g)
    }

    /// Camera 0 to the origin and unit mean camera-camera baseline.
    fn normalize(&self, x: &mut [Vector3<f64>]) {
        let origin = x[0];
        for p in x.iter_mut() {
            *p -= origin;
        }
        let baselines: Vec<f64> = self
            .measurements
            .iter()
            .filter(|m| m.is_camera_camera())
            .map(|m| {
                let (a, b) = self.endpoints(m);
                (x[b] - x[a]).norm()
            })
            .collect();
        let mean = if baselines.is_empty() {
            x[1..self.n_cam].iter().map(|p| p.norm()).sum::<f64>() / (self.n_cam - 1).max(1) as f64
        } else {
            baselines.iter().sum::<f64>() / baselines.len() as f64
        };
        if mean > 0.0 && mean.is_finite() {
            for p in x.iter_mut() {
                *p /= mean;
            }
        }
    }

    fn levenberg_marquardt(&self, x: &mut Vec<Vector3<f64>>, max_iters: usize) -> usize {
        let mut lambda = 1e-4;
        let mut f = self.cost(x);
        for it in 0..max_iters {
            let (h, g) = self.normal_equations(x);
            if g.norm() < 1e-14 {
                return it;
            }
            let mut improved = false;
            for _ in 0..20 {
                let mut damped = h.clone();
                for k in 0..damped.nrows() {
                    damped[(k, k)] += lambda * (h[(k, k)] + 1e-9);
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let delta = chol.solve(&(-&g));
                let mut cand: Vec<Vector3<f64>> = x
                    .iter()
                    .enumerate()
                    .map(|(k, p)| p + delta.fixed_rows::<3>(3 * k))
                    .collect();
                self.normalize(&mut cand);
                let fc = self.cost(&cand);
                if fc < f {
                    let rel = (f - fc) / f.max(1e-300);
                    *x = cand;
                    f = fc;
                    lambda = (lambda * 0.1).max(1e-12);
                    improved = true;
                    if rel < 1e-12 {
                        return it + 1;
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !improved {
                return it;
            }
        }
        max_iters
    }

    /// Normal matrix of the linear surrogate `(I - d d^T)(x_b - x_a) = 0`,
    /// optionally without the rows and columns of node 0.
    fn surrogate(&self, pin_first: bool) -> DMatrix<f64> {
        let off = usize::from(pin_first);
        let dim = 3 * (self.n_nodes - off);
        let mut ata = DMatrix::zeros(dim, dim);
        for m in self.measurements {
            let (a, b) = self.endpoints(m);
            let d = m.direction.as_ref();
            let p = Matrix3::identity() - d * d.transpose();
            let ptp = p.transpose() * p;
            for (u, su) in [(a, -1.0), (b, 1.0)] {
                for (v, sv) in [(a, -1.0), (b, 1.0)] {
                    if u < off || v < off {
                        continue;
                    }
                    let mut blk = ata.view_mut((3 * (u - off), 3 * (v - off)), (3, 3));
                    blk += ptp * (su * sv);
                }
            }
        }
        ata
    }

    /// Least-squares solution of the linear surrogate with node 0 pinned,
    /// signed so that most measurements agree.
    fn linear_init(&self) -> Vec<Vector3<f64>> {
        let ata = self.surrogate(true);
        let eig = ata.symmetric_eigen();
        let k = eig.eigenvalues.imin();
        let v = eig.eigenvectors.column(k);
        let mut x = vec![Vector3::zeros(); self.n_nodes];
        for node in 1..self.n_nodes {
            x[node] = v.fixed_rows::<3>(3 * (node - 1)).into_owned();
        }
        let agree: f64 = self
            .measurements
            .iter()
            .map(|m| {
                let (a, b) = self.endpoints(m);
                m.direction.as_ref().dot(&(x[b] - x[a])).signum()
            })
            .sum();
        if agree < 0.0 {
            for p in &mut x {
                *p = -*p;
            }
        }
        x
    }
}

fn check_connected(measurements: &[DirectionMeasurement], n_cam: usize, n_nodes: usize) -> Result<(), TransAvgError> {
    let mut adj = vec![Vec::new(); n_nodes];
    for m in measurements {
        let b = node_index(n_cam, m.to);
        adj[m.from].push(b);
        adj[b].push(m.from);
    }
    let mut seen = vec![false; n_nodes];
    seen[0] = true;
    let mut queue = VecDeque::from([0]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    match (0..n_cam).find(|&c| !seen[c]) {
        Some(camera) => Err(TransAvgError::Disconnected { camera }),
        None => Ok(()),
    }
}

/// Robust chordal cost of candidate camera and landmark positions.
pub fn translation_cost(
    measurements: &[DirectionMeasurement],
    positions: &[Vector3<f64>],
    landmark_positions: &[Vector3<f64>],
    huber_delta: Option<f64>,
) -> f64 {
    let x: Vec<Vector3<f64>> = positions.iter().chain(landmark_positions).copied().collect();
    let solver = Solver {
        measurements,
        n_cam: positions.len(),
        n_nodes: x.len(),
        loss: huber_delta.map_or(Loss::Squared, Loss::huber),
    };
    solver.cost(&x)
}

/// Robust chordal solve over camera (and landmark) positions.
///
/// Camera ids must be `0..n_cameras` and landmark ids `0..n_landmarks`; every
/// node must appear in at least one measurement.
pub fn solve_translations(
    measurements: &[DirectionMeasurement],
    cfg: &TranslationConfig,
    seed: u64,
) -> Result<TranslationSolution, TransAvgError> {
    if measurements.is_empty() {
        return Err(TransAvgError::Empty);
    }
    let (n_cam, n_lm) = node_counts(measurements);
    let n_nodes = n_cam + n_lm;
    check_connected(measurements, n_cam, n_nodes)?;
    let solver = Solver {
        measurements,
        n_cam,
        n_nodes,
        loss: match cfg.huber_delta {
            Some(d) => Loss::huber(d),
            None => Loss::Squared,
        },
    };

    // Three translations and the scale are free; anything beyond that is a
    // parallel-rigidity failure. Rigidity depends on the directions only.
    let eig = solver.surrogate(false).symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let null_dims = eig.eigenvalues.iter().filter(|&&v| v.abs() <= 1e-9 * top.max(1e-300)).count();
    if null_dims > 4 {
        return Err(TransAvgError::Underconstrained { null_dims });
    }

    let mut best = solver.linear_init();
    solver.normalize(&mut best);
    let mut best_iters = solver.levenberg_marquardt(&mut best, cfg.max_iters);
    let mut best_cost = solver.cost(&best);
    let mut rng = task_rng(seed, &[]);
    for _ in 0..cfg.random_starts {
        if best_cost < 1e-20 {
            break;
        }
        let mut x: Vec<Vector3<f64>> = (0..n_nodes)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        solver.normalize(&mut x);
        let iters = solver.levenberg_marquardt(&mut x, cfg.max_iters);
        let c = solver.cost(&x);
        if c < best_cost {
            best = x;
            best_cost = c;
            best_iters = iters;
        }
    }

    Ok(TranslationSolution {
        landmark_positions: best[n_cam..].to_vec(),
        positions: best[..n_cam].to_vec(),
        cost: best_cost,
        iterations: best_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vector3<f64>) -> UnitVector3 {
        UnitVector3::new_normalize(v).unwrap()
    }

    fn scene(n_cam: usize, n_lm: usize, rng: &mut impl Rng) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let cams = (0..n_cam)
            .map(|k| {
                let a = k as f64 / n_cam as f64 * std::f64::consts::TAU;
                Vector3::new(5.0 * a.cos(), rng.random_range(-0.5..0.5), 5.0 * a.sin())
            })
            .collect();
        let lms = (0..n_lm)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        (cams, lms)
    }

    fn measure(
        cams: &[Vector3<f64>],
        lms: &[Vector3<f64>],
        p_edge: f64,
        noise_rad: f64,
        rng: &mut impl Rng,
    ) -> Vec<DirectionMeasurement> {
        let noisy = |v: Vector3<f64>, rng: &mut dyn rand::RngCore| {
            let n = Vector3::from_fn(|_, _| StandardNormal.sample(rng)) * noise_rad;
            unit(v.normalize() + n)
        };
        let mut out = Vec::new();
        for i in 0..cams.len() {
            for j in (i + 1)..cams.len() {
                if j == i + 1 || rng.random_bool(p_edge) {
                    out.push(DirectionMeasurement::camera(i, j, noisy(cams[j] - cams[i], rng)));
                }
            }
            for (l, p) in lms.iter().enumerate() {
                out.push(DirectionMeasurement::landmark(i, l, noisy(p - cams[i], rng)));
            }
        }
        out
    }

    /// Relative position error after removing translation and scale.
    fn aligned_error(est: &[Vector3<f64>], truth: &[Vector3<f64>]) -> f64 {
        let shift = truth[0];
        let t: Vec<Vector3<f64>> = truth.iter().map(|p| p - shift).collect();
        let s = t.iter().zip(est).map(|(a, b)| a.dot(b)).sum::<f64>() / est.iter().map(|b| b.norm_squared()).sum::<f64>();
        let scale = t.iter().map(|p| p.norm()).fold(0.0, f64::max);
        est.iter().zip(&t).map(|(e, g)| (e * s - g).norm()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn noise_free_network_with_landmarks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cams, lms) = scene(20, 10, &mut rng);
        let ms = measure(&cams, &lms, 0.2, 0.0, &mut rng);
        let sol = solve_translations(&ms, &TranslationConfig::default(), 0).unwrap();
        assert!(aligned_error(&sol.positions, &cams) < 1e-6);
        assert_eq!(sol.positions[0], Vector3::zeros());
        for m in &ms {
            if let Endpoint::Landmark(l) = m.to {
                let d = (sol.landmark_positions[l] - sol.positions[m.from]).normalize();
                assert!((d - m.direction.as_ref()).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn two_cameras_unit_baseline() {
        let d = unit(Vector3::new(1.0, 2.0, -0.5));
        let sol = solve_translations(&[DirectionMeasurement::camera(0, 1, d)], &TranslationConfig::default(), 0).unwrap();
        assert!((sol.positions[1] - d.as_ref()).norm() < 1e-9);
    }

    #[test]
    fn gauge_and_scale_invariant_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cams, lms) = scene(8, 4, &mut rng);
        let ms = measure(&cams, &lms, 0.5, 0.05, &mut rng);
        let solver = Solver { measurements: &ms, n_cam: 8, n_nodes: 12, loss: Loss::huber(0.1) };
        let x: Vec<Vector3<f64>> = cams.iter().chain(&lms).copied().collect();
        let shift = Vector3::new(3.0, -1.0, 7.0);
        let y: Vec<Vector3<f64>> = x.iter().map(|p| p * 2.7 + shift).collect();
        assert!((solver.cost(&x) - solver.cost(&y)).abs() < 1e-9);
    }

    #[test]
    fn collinear_chain_is_underconstrained() {
        let x = unit(Vector3::x());
        let ms = [DirectionMeasurement::camera(0, 1, x), DirectionMeasurement::camera(1, 2, x)];
        assert!(matches!(
            solve_translations(&ms, &TranslationConfig::default(), 0),
            Err(TransAvgError::Underconstrained { .. })
        ));
    }

    #[test]
    fn disconnected_camera() {
        let x = unit(Vector3::x());
        let ms = [DirectionMeasurement::camera(0, 1, x), DirectionMeasurement::camera(2, 3, x)];
        assert_eq!(
            solve_translations(&ms, &TranslationConfig::default(), 0),
            Err(TransAvgError::Disconnected { camera: 2 })
        );
    }

    #[test]
    fn mfas_keeps_clean_measurements() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cams, lms) = scene(12, 5, &mut rng);
        let ms = measure(&cams, &lms, 0.3, 0.0, &mut rng);
        let r = mfas_filter(&ms, 48, 0.1, 9, &Executor::new(1));
        assert!(r.inliers.iter().all(|&k| k));
        assert!(r.violation.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mfas_flags_reversed_direction() {
        let x = Vector3::x();
        let ms = [
            DirectionMeasurement::camera(0, 1, unit(x)),
            DirectionMeasurement::camera(1, 2, unit(x)),
            DirectionMeasurement::camera(0, 2, unit(-x)),
        ];
        let r = mfas_filter(&ms, 48, 0.1, 1, &Executor::new(1));

        // Oracle: every order of three nodes; the reversed arc is the unique
        // violated one in every minimum-feedback order with the lowest index
        // placed first.
        let arcs = [(0usize, 1usize), (1, 2), (2, 0)];
        let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let feedback = |o: &[usize; 3]| {
            let pos = |v: usize| o.iter().position(|&x| x == v).unwrap();
            arcs.iter().filter(|&&(a, b)| pos(b) < pos(a)).count()
        };
        let min_fb = orders.iter().map(feedback).min().unwrap();
        assert_eq!(min_fb, 1);
        assert_eq!(feedback(&[0, 1, 2]), 1);

        assert!(r.violation[2] > r.violation[0] && r.violation[2] > r.violation[1]);
        assert!(!r.inliers[2]);
        let again = mfas_filter(&ms, 48, 0.1, 1, &Executor::new(1));
        assert_eq!(again, r);
    }

    #[test]
    fn huber_bounds_flipped_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (cams, lms) = scene(15, 6, &mut rng);
        let ms = measure(&cams, &lms, 0.3, 0.01, &mut rng);
        let cfg = TranslationConfig::default();
        let clean = solve_translations(&ms, &cfg, 0).unwrap();
        let mut bad = ms.clone();
        let k = bad.iter().position(|m| m.is_camera_camera()).unwrap();
        bad[k].direction = -bad[k].direction;

        let robust = solve_translations(&bad, &cfg, 0).unwrap();
        let l2 = solve_translations(&bad, &TranslationConfig { huber_delta: None, ..cfg.clone() }, 0).unwrap();
        let e_clean = aligned_error(&clean.positions, &cams);
        let e_robust = aligned_error(&robust.positions, &cams);
        let e_l2 = aligned_error(&l2.positions, &cams);
        assert!(e_robust <= 5.0 * e_clean, "{e_robust} vs {e_clean}");
        assert!(e_l2 > 5.0 * e_clean, "{e_l2} vs {e_clean}");
    }
}
