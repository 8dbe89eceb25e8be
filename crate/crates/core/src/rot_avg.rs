//! Global rotations from relative ones by chordal averaging over a staircase
//! of relaxations `St(p, 3)^n`, `p = 3, 4, ...`, with a second-order
//! optimality certificate at each level.
//!
//! Conventions: `R_i` is camera-to-world and an edge `(i, j, M)` carries
//! `M = R_j^T R_i`, so a consistent solution satisfies `R_j M = R_i`. The
//! chordal cost is `sum kappa ||R_j M - R_i||_F^2`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Rotation3;
use crate::view_graph::ViewGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationEdge {
    pub i: usize,
    pub j: usize,
    /// `R_j^T R_i`.
    pub rotation: Rotation3,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationAveragingProblem {
    pub n_cameras: usize,
    pub edges: Vec<RotationEdge>,
}

impl RotationAveragingProblem {
    /// Problem over the vertices of `graph`, renumbered in increasing order.
    /// Returns the camera id of every problem index.
    pub fn from_view_graph(graph: &ViewGraph, kappa: f64) -> (Self, Vec<usize>) {
        let ids: Vec<usize> = graph.vertices.iter().copied().collect();
        let index = |v: usize| ids.binary_search(&v).expect("vertex");
        let edges = graph
            .edges
            .keys()
            .map(|&(a, b)| RotationEdge {
                i: index(a),
                j: index(b),
                rotation: graph.rotation(a, b).expect("edge"),
                kappa,
            })
            .collect();
        (
            Self {
                n_cameras: ids.len(),
                edges,
            },
            ids,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotationConfig {
    /// Measurement uncertainty; edges get `kappa = 1 / sigma^2`.
    pub sigma: f64,
    pub p_max: usize,
    pub gradient_tol: f64,
    pub max_iters_per_level: usize,
    pub certificate_tol: f64,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            p_max: 30,
            gradient_tol: 1e-9,
            max_iters_per_level: 10_000,
            certificate_tol: 1e-7,
        }
    }
}

impl RotationConfig {
    pub fn kappa(&self) -> f64 {
        1.0 / (self.sigma * self.sigma)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotAvgError {
    #[error("camera {camera} is not connected to camera 0")]
    Disconnected { camera: usize },
    #[error("problem has no cameras")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub p: usize,
    pub cost: f64,
    pub iterations: usize,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSolution {
    /// Gauge-fixed: camera 0 is the identity.
    pub rotations: Vec<Rotation3>,
    /// Chordal cost of the rounded rotations.
    pub cost: f64,
    /// `false` when `p_max` was reached without a certificate.
    pub certified: bool,
    pub p_final: usize,
    pub levels: Vec<LevelReport>,
}

/// Composes relatives along a BFS tree rooted at camera 0.
pub fn spanning_tree_init(problem: &RotationAveragingProblem) -> Result<Vec<Rotation3>, RotAvgError> {
    let n = problem.n_cameras;
    if n == 0 {
        return Err(RotAvgError::Empty);
    }
    // adj[v] holds (neighbor, rotation taking v's frame to the neighbor's).
    let mut adj: Vec<Vec<(usize, Rotation3)>> = vec![Vec::new(); n];
    for e in &problem.edges {
        adj[e.i].push((e.j, e.rotation));
        adj[e.j].push((e.i, e.rotation.inverse()));
    }
    let mut out: Vec<Option<Rotation3>> = vec![None; n];
    out[0] = Some(Rotation3::identity());
    let mut queue = VecDeque::from([0]);
    while let Some(v) = queue.pop_front() {
        let r_v = out[v].expect("visited");
        for (w, r_wv) in &adj[v] {
            if out[*w].is_none() {
                // R_w (R_w^T R_v) = R_v  =>  R_w = R_v r_wv^T.
                out[*w] = Some(r_v * r_wv.inverse());
                queue.push_back(*w);
            }
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(k, r)| r.ok_or(RotAvgError::Disconnected { camera: k }))
        .collect()
}

pub fn chordal_cost(problem: &RotationAveragingProblem, rotations: &[Rotation3]) -> f64 {
    problem
        .edges
        .iter()
        .map(|e| {
            e.kappa * (rotations[e.j].matrix() * e.rotation.matrix() - rotations[e.i].matrix()).norm_squared()
        })
        .sum()
}

/// `sum kappa tr(R_i^T R_j M)`; the chordal cost equals
/// `2 (3 sum kappa - trace_objective)`.
pub fn trace_objective(problem: &RotationAveragingProblem, rotations: &[Rotation3]) -> f64 {
    problem
        .edges
        .iter()
        .map(|e| e.kappa * (rotations[e.i].matrix().transpose() * rotations[e.j].matrix() * e.rotation.matrix()).trace())
        .sum()
}

/// Relaxed iterate: `p x 3n`, block `i` in columns `3i..3i+3`.
struct Staircase<'a> {
    problem: &'a RotationAveragingProblem,
}

impl Staircase<'_> {
    fn block(y: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
        y.columns(3 * i, 3).into_owned()
    }

    fn cost(&self, y: &DMatrix<f64>) -> f64 {
        self.problem
            .edges
            .iter()
            .map(|e| {
                let m = to_dyn(e.rotation.matrix());
                e.kappa * (Self::block(y, e.j) * m - Self::block(y, e.i)).norm_squared()
            })
            .sum()
    }

    fn euclidean_gradient(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(y.nrows(), y.ncols());
        for e in &self.problem.edges {
            let m = to_dyn(e.rotation.matrix());
            let r = (Self::block(y, e.j) * &m - Self::block(y, e.i)) * (2.0 * e.kappa);
            let mut gi = g.columns_mut(3 * e.i, 3);
            gi -= &r;
            let mut gj = g.columns_mut(3 * e.j, 3);
            gj += r * m.transpose();
        }
        g
    }

    fn riemannian_gradient(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = self.euclidean_gradient(y);
        for i in 0..self.problem.n_cameras {
            let yi = Self::block(y, i);
            let gi = Self::block(&g, i);
            let s = yi.transpose() * &gi;
            let sym = (&s + s.transpose()) * 0.5;
            let proj = gi - yi * sym;
            g.columns_mut(3 * i, 3).copy_from(&proj);
        }
        g
    }

    /// Connection Laplacian `L` with `cost = tr(Y L Y^T)`.
    fn laplacian(&self) -> DMatrix<f64> {
        let n = self.problem.n_cameras;
        let mut l = DMatrix::zeros(3 * n, 3 * n);
        for e in &self.problem.edges {
            let m = to_dyn(e.rotation.matrix());
            let k = e.kappa;
            for d in 0..3 {
                l[(3 * e.i + d, 3 * e.i + d)] += k;
                l[(3 * e.j + d, 3 * e.j + d)] += k;
            }
            let mut lij = l.view_mut((3 * e.i, 3 * e.j), (3, 3));
            lij -= m.transpose() * k;
            let mut lji = l.view_mut((3 * e.j, 3 * e.i), (3, 3));
            lji -= m * k;
        }
        l
    }

    /// Minimum eigenpair of `S = L - blkdiag(Lambda)`.
    fn certificate(&self, y: &DMatrix<f64>, l: &DMatrix<f64>) -> (f64, DVector<f64>) {
        let n = self.problem.n_cameras;
        let yl = y * l;
        let mut s = l.clone();
        for i in 0..n {
            let lam = Self::block(y, i).transpose() * yl.columns(3 * i, 3);
            let lam = (&lam + lam.transpose()) * 0.5;
            let mut sii = s.view_mut((3 * i, 3 * i), (3, 3));
            sii -= lam;
        }
        let eig = SymmetricEigen::new(s);
        let k = eig.eigenvalues.imin();
        (eig.eigenvalues[k], eig.eigenvectors.column(k).into_owned())
    }

    /// Riemannian gradient descent with Barzilai-Borwein steps and Armijo
    /// backtracking. Returns the iteration count.
    fn descend(&self, y: &mut DMatrix<f64>, cfg: &RotationConfig) -> usize {
        let max_degree = {
            let mut deg = vec![0.0; self.problem.n_cameras];
            for e in &self.problem.edges {
                deg[e.i] += e.kappa;
                deg[e.j] += e.kappa;
            }
            deg.into_iter().fold(0.0, f64::max)
        };
        let mut step = 1.0 / (4.0 * max_degree.max(1e-12));
        let mut f = self.cost(y);
        let mut grad = self.riemannian_gradient(y);
        for it in 0..cfg.max_iters_per_level {
            let gnorm2 = grad.norm_squared();
            if gnorm2.sqrt() < cfg.gradient_tol {
                return it;
            }
            let mut t = step;
            let mut accepted = None;
            for _ in 0..60 {
                let cand = retract(&(&*y - &grad * t));
                let fc = self.cost(&cand);
                if fc <= f - 1e-4 * t * gnorm2 {
                    accepted = Some((cand, fc));
                    break;
                }
                t *= 0.5;
            }
            let Some((next, fnext)) = accepted else {
                return it;
            };
            let next_grad = self.riemannian_gradient(&next);
            let s = &next - &*y;
            let dg = &next_grad - &grad;
            let sy = s.dot(&dg).abs();
            step = if sy > 0.0 { (s.norm_squared() / sy).clamp(1e-12, 1e12) } else { t * 2.0 };
            *y = next;
            f = fnext;
            grad = next_grad;
        }
        cfg.max_iters_per_level
    }
}

fn to_dyn(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

/// Polar projection of every `p x 3` block onto the Stiefel manifold.
fn retract(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for i in 0..x.ncols() / 3 {
        let b = x.columns(3 * i, 3);
        let gram = b.transpose() * b;
        let eig = SymmetricEigen::new(gram);
        let inv_sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(1e-300).sqrt()))
            * eig.eigenvectors.transpose();
        out.columns_mut(3 * i, 3).copy_from(&(b * inv_sqrt));
    }
    out
}

/// Rank-3 projection of the relaxed solution followed by per-block
/// projection onto SO(3) and gauge fixing on camera 0.
fn round(y: &DMatrix<f64>) -> Vec<Rotation3> {
    let n = y.ncols() / 3;
    let svd = y.clone().svd(true, false);
    let u = svd.u.expect("u");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut u3 = DMatrix::zeros(y.nrows(), 3);
    for (c, &k) in order.iter().take(3).enumerate() {
        u3.set_column(c, &u.column(k));
    }
    let mut z = u3.transpose() * y;
    let negative = (0..n)
        .filter(|&i| {
            let b = z.columns(3 * i, 3);
            Matrix3::from_iterator(b.iter().copied()).determinant() < 0.0
        })
        .count();
    if 2 * negative > n {
        z.row_mut(2).neg_mut();
    }
    let blocks: Vec<Rotation3> = (0..n)
        .map(|i| {
            let b = z.columns(3 * i, 3);
            Rotation3::from_matrix_projected(&Matrix3::from_iterator(b.iter().copied()))
        })
        .collect();
    let r0_inv = blocks[0].inverse();
    let mut out: Vec<Rotation3> = blocks.iter().map(|r| &r0_inv * r).collect();
    out[0] = Rotation3::identity();
    out
}

/// Chordal rotation averaging with the staircase lift.
///
/// Reaching `p_max` without a certificate is not an error; the rounded
/// solution is returned with `certified == false`.
pub fn solve_rotations(
    problem: &RotationAveragingProblem,
    cfg: &RotationConfig,
) -> Result<RotationSolution, RotAvgError> {
    let init = spanning_tree_init(problem)?;
    let n = problem.n_cameras;
    if problem.edges.is_empty() {
        return Ok(RotationSolution {
            rotations: init,
            cost: 0.0,
            certified: true,
            p_final: 3,
            levels: Vec::new(),
        });
    }
    let stair = Staircase { problem };
    let laplacian = stair.laplacian();
    let scale = (0..3 * n).map(|k| laplacian[(k, k)]).fold(1.0, f64::max);

    let mut y = DMatrix::zeros(3, 3 * n);
    for (i, r) in init.iter().enumerate() {
        y.columns_mut(3 * i, 3).copy_from(&to_dyn(r.matrix()));
    }
    let mut levels = Vec::new();
    let mut p = 3;
    let mut certified = false;
    loop {
        let iterations = stair.descend(&mut y, cfg);
        let (lambda, v) = stair.certificate(&y, &laplacian);
        let cost = stair.cost(&y);
        log::debug!("rotation level p={p}: cost {cost:e}, lambda_min {lambda:e}, {iterations} iterations");
        levels.push(LevelReport {
            p,
            cost,
            iterations,
            min_eigenvalue: lambda,
        });
        if lambda >= -cfg.certificate_tol * scale {
            certified = true;
            break;
        }
        if p >= cfg.p_max {
            log::warn!("rotation averaging reached p={p} without a certificate");
            break;
        }
        // Escape along the negative curvature direction: the new row is
        // tangent at the lifted point and the gradient there is zero.
        let mut lifted = y.clone().insert_row(p, 0.0);
        let mut dir = DMatrix::zeros(p + 1, 3 * n);
        dir.set_row(p, &v.transpose());
        let mut t = 1.0;
        for _ in 0..50 {
            let cand = retract(&(&lifted + &dir * t));
            if stair.cost(&cand) < cost {
                lifted = cand;
                break;
            }
            t *= 0.5;
        }
        y = lifted;
        p += 1;
    }

    let rotations = round(&y);
    Ok(RotationSolution {
        cost: chordal_cost(problem, &rotations),
        rotations,
        certified,
        p_final: p,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotation_angular_error;
    use crate::view_graph::tests::random_rotation;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn problem_from(truth: &[Rotation3], pairs: &[(usize, usize)], noise_deg: f64, rng: &mut impl Rng) -> RotationAveragingProblem {
        let edges = pairs
            .iter()
            .map(|&(i, j)| {
                let exact = truth[j].inverse() * truth[i];
                let axis = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                let angle: f64 = StandardNormal.sample(rng);
                let noise = Rotation3::from_axis_angle(&axis, (noise_deg * angle).to_radians());
                RotationEdge {
                    i,
                    j,
                    rotation: noise * exact,
                    kappa: 1.0,
                }
            })
            .collect();
        RotationAveragingProblem {
            n_cameras: truth.len(),
            edges,
        }
    }

    fn aligned_errors(est: &[Rotation3], truth: &[Rotation3]) -> Vec<f64> {
        // Estimates are gauge-fixed on camera 0.
        let g = truth[0].inverse();
        est.iter()
            .zip(truth)
            .map(|(e, t)| rotation_angular_error(e, &(&g * t)))
            .collect()
    }

    fn dense_pairs(n: usize, p_edge: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if j == i + 1 || rng.random_bool(p_edge) {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    #[test]
    fn chain_init_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth: Vec<Rotation3> = (0..3).map(|_| random_rotation(&mut rng)).collect();
        let p = problem_from(&truth, &[(0, 1), (1, 2)], 0.0, &mut rng);
        let init = spanning_tree_init(&p).unwrap();
        assert!(aligned_errors(&init, &truth).iter().all(|&e| e < 1e-9));
    }

    #[test]
    fn single_camera_and_disconnected() {
        let p = RotationAveragingProblem { n_cameras: 1, edges: vec![] };
        assert_eq!(spanning_tree_init(&p).unwrap(), vec![Rotation3::identity()]);
        let p = RotationAveragingProblem { n_cameras: 2, edges: vec![] };
        assert_eq!(spanning_tree_init(&p), Err(RotAvgError::Disconnected { camera: 1 }));
    }

    #[test]
    fn noise_free_cyclic_init_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth: Vec<Rotation3> = (0..12).map(|_| random_rotation(&mut rng)).collect();
        let pairs = dense_pairs(12, 0.4, &mut rng);
        let p = problem_from(&truth, &pairs, 0.0, &mut rng);
        let init = spanning_tree_init(&p).unwrap();
        assert!(chordal_cost(&p, &init) < 1e-18);
    }

    #[test]
    fn noise_free_twenty_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth: Vec<Rotation3> = (0..20).map(|_| random_rotation(&mut rng)).collect();
        let pairs = dense_pairs(20, 0.3, &mut rng);
        let p = problem_from(&truth, &pairs, 0.0, &mut rng);
        let sol = solve_rotations(&p, &RotationConfig { sigma: 0.1, ..Default::default() }).unwrap();
        assert!(sol.certified);
        let max = aligned_errors(&sol.rotations, &truth).into_iter().fold(0.0, f64::max);
        assert!(max < 1e-6, "{max}");
    }

    #[test]
    fn two_cameras_reproduce_measurement() {
        let m = Rotation3::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 0.7);
        let p = RotationAveragingProblem {
            n_cameras: 2,
            edges: vec![RotationEdge { i: 0, j: 1, rotation: m, kappa: 1.0 }],
        };
        let sol = solve_rotations(&p, &RotationConfig::default()).unwrap();
        let back = sol.rotations[1].inverse() * sol.rotations[0];
        assert!(rotation_angular_error(&back, &m) < 1e-9);
    }

    #[test]
    fn averaging_beats_spanning_tree_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth: Vec<Rotation3> = (0..20).map(|_| random_rotation(&mut rng)).collect();
        let pairs = dense_pairs(20, 0.4, &mut rng);
        let p = problem_from(&truth, &pairs, 2.0, &mut rng);
        let init = spanning_tree_init(&p).unwrap();
        let sol = solve_rotations(&p, &RotationConfig::default()).unwrap();
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let e_init = mean(aligned_errors(&init, &truth));
        let e_sol = mean(aligned_errors(&sol.rotations, &truth));
        assert!(e_sol < e_init, "{e_sol} vs {e_init}");
        assert!(sol.certified);
    }

    #[test]
    fn cost_and_trace_objective_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth: Vec<Rotation3> = (0..8).map(|_| random_rotation(&mut rng)).collect();
        let pairs = dense_pairs(8, 0.5, &mut rng);
        let p = problem_from(&truth, &pairs, 5.0, &mut rng);
        let r: Vec<Rotation3> = (0..8).map(|_| random_rotation(&mut rng)).collect();
        let ksum: f64 = p.edges.iter().map(|e| e.kappa).sum();
        let lhs = chordal_cost(&p, &r);
        let rhs = 2.0 * (3.0 * ksum - trace_objective(&p, &r));
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn staircase_is_monotone_and_rounding_orthonormal() {
        // Large noise makes uncertified low levels more likely.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth: Vec<Rotation3> = (0..10).map(|_| random_rotation(&mut rng)).collect();
        let pairs = dense_pairs(10, 0.5, &mut rng);
        let p = problem_from(&truth, &pairs, 40.0, &mut rng);
        let sol = solve_rotations(&p, &RotationConfig::default()).unwrap();
        for w in sol.levels.windows(2) {
            assert!(w[1].cost <= w[0].cost + 1e-9);
        }
        for r in &sol.rotations {
            assert!(r.orthonormality_error() < 1e-9);
        }
        assert_eq!(sol.rotations[0], Rotation3::identity());
    }
}
