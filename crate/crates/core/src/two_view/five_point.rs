//! Minimal five-point essential matrix solver.
//!
//! The essential matrix is written as `E = x X + y Y + z Z + W` over the
//! null space of the five epipolar constraints. Substituting into
//! `det E = 0` and `2 E E^T E - tr(E E^T) E = 0` gives ten cubics in
//! `(x, y, z)`. After eliminating the ten cubic monomials, the remaining
//! ten monomials form a basis of the quotient ring, and the solutions are
//! read from the eigenvectors of the action matrix of `x`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

/// Exponents of `(x, y, z)`; cubic monomials first, then the quotient basis
/// `[x^2, xy, xz, y^2, yz, z^2, x, y, z, 1]`.
const MONOMIALS: [(u8, u8, u8); 20] = [
    (3, 0, 0),
    (2, 1, 0),
    (2, 0, 1),
    (1, 2, 0),
    (1, 1, 1),
    (1, 0, 2),
    (0, 3, 0),
    (0, 2, 1),
    (0, 1, 2),
    (0, 0, 3),
    (2, 0, 0),
    (1, 1, 0),
    (1, 0, 1),
    (0, 2, 0),
    (0, 1, 1),
    (0, 0, 2),
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (0, 0, 0),
];

fn monomial_index(e: (u8, u8, u8)) -> usize {
    MONOMIALS
        .iter()
        .position(|&m| m == e)
        .expect("product stays within degree 3")
}

/// Polynomial of total degree at most three.
#[derive(Clone, Copy, Debug, Default)]
struct Poly([f64; 20]);

impl Poly {
    fn linear(x: f64, y: f64, z: f64, w: f64) -> Self {
        let mut p = Poly::default();
        p.0[16] = x;
        p.0[17] = y;
        p.0[18] = z;
        p.0[19] = w;
        p
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::default();
        for (i, &a) in self.0.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in other.0.iter().enumerate() {
                if b == 0.0 {
                    continue;
                }
                let (ea, eb) = (MONOMIALS[i], MONOMIALS[j]);
                let k = monomial_index((ea.0 + eb.0, ea.1 + eb.1, ea.2 + eb.2));
                out.0[k] += a * b;
            }
        }
        out
    }

    fn add(&self, other: &Poly) -> Poly {
        let mut out = *self;
        for (o, v) in out.0.iter_mut().zip(other.0.iter()) {
            *o += v;
        }
        out
    }

    fn sub(&self, other: &Poly) -> Poly {
        let mut out = *self;
        for (o, v) in out.0.iter_mut().zip(other.0.iter()) {
            *o -= v;
        }
        out
    }

    fn scale(&self, s: f64) -> Poly {
        let mut out = *self;
        for o in out.0.iter_mut() {
            *o *= s;
        }
        out
    }
}

type PolyMat = [[Poly; 3]; 3];

fn pm_mul(a: &PolyMat, b: &PolyMat) -> PolyMat {
    let mut out = [[Poly::default(); 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            for k in 0..3 {
                *cell = cell.add(&a[r][k].mul(&b[k][c]));
            }
        }
    }
    out
}

fn pm_transpose(a: &PolyMat) -> PolyMat {
    let mut out = [[Poly::default(); 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = a[c][r];
        }
    }
    out
}

/// Row of the epipolar constraint `x_j^T E x_i = 0` for row-major `vec(E)`.
pub(crate) fn epipolar_row(xi: &Vector3<f64>, xj: &Vector3<f64>) -> SVector<f64, 9> {
    SVector::<f64, 9>::from_fn(|k, _| xj[k / 3] * xi[k % 3])
}

fn null_space_basis(xi: &[Vector3<f64>; 5], xj: &[Vector3<f64>; 5]) -> [Matrix3<f64>; 4] {
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for k in 0..5 {
        a.set_row(k, &epipolar_row(&xi[k], &xj[k]).transpose());
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&p, &q| svd.singular_values[p].total_cmp(&svd.singular_values[q]));
    let to_mat = |row: usize| Matrix3::from_fn(|r, c| v_t[(row, 3 * r + c)]);
    [
        to_mat(order[0]),
        to_mat(order[1]),
        to_mat(order[2]),
        to_mat(order[3]),
    ]
}

/// Essential matrices consistent with five normalized correspondences
/// (homogeneous `[x, y, 1]` rays, `x_j^T E x_i = 0`). Up to ten solutions,
/// each scaled to unit Frobenius norm.
pub fn five_point(xi: &[Vector3<f64>; 5], xj: &[Vector3<f64>; 5]) -> Vec<Matrix3<f64>> {
    let [bx, by, bz, bw] = null_space_basis(xi, xj);
    let mut e: PolyMat = [[Poly::default(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            e[r][c] = Poly::linear(bx[(r, c)], by[(r, c)], bz[(r, c)], bw[(r, c)]);
        }
    }

    let mut constraints = SMatrix::<f64, 10, 20>::zeros();
    let det = e[0][0]
        .mul(&e[1][1].mul(&e[2][2]).sub(&e[1][2].mul(&e[2][1])))
        .sub(&e[0][1].mul(&e[1][0].mul(&e[2][2]).sub(&e[1][2].mul(&e[2][0]))))
        .add(&e[0][2].mul(&e[1][0].mul(&e[2][1]).sub(&e[1][1].mul(&e[2][0]))));
    constraints.set_row(0, &SMatrix::<f64, 1, 20>::from_row_slice(&det.0));

    let eet = pm_mul(&e, &pm_transpose(&e));
    let trace = eet[0][0].add(&eet[1][1]).add(&eet[2][2]);
    let eete = pm_mul(&eet, &e);
    for r in 0..3 {
        for c in 0..3 {
            let p = eete[r][c].scale(2.0).sub(&trace.mul(&e[r][c]));
            constraints.set_row(1 + 3 * r + c, &SMatrix::<f64, 1, 20>::from_row_slice(&p.0));
        }
    }

    let lead: SMatrix<f64, 10, 10> = constraints.fixed_view::<10, 10>(0, 0).into_owned();
    let rest: SMatrix<f64, 10, 10> = constraints.fixed_view::<10, 10>(0, 10).into_owned();
    let Some(reduced) = lead.lu().solve(&rest) else {
        return Vec::new();
    };

    // Row k of the action matrix expresses x * basis[k] in the basis.
    let mut action = SMatrix::<f64, 10, 10>::zeros();
    for k in 0..6 {
        action.set_row(k, &(-reduced.row(k)));
    }
    action[(6, 0)] = 1.0; // x * x  = x^2
    action[(7, 1)] = 1.0; // x * y  = xy
    action[(8, 2)] = 1.0; // x * z  = xz
    action[(9, 6)] = 1.0; // x * 1  = x

    let eigenvalues = action.complex_eigenvalues();
    let mut solutions = Vec::new();
    for lambda in eigenvalues.iter() {
        if lambda.im.abs() > 1e-8 * (1.0 + lambda.re.abs()) {
            continue;
        }
        let shifted = action - SMatrix::<f64, 10, 10>::identity() * lambda.re;
        let svd = shifted.svd(false, true);
        let Some(v_t) = svd.v_t else { continue };
        let (min_idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let v = v_t.row(min_idx);
        if v[9].abs() < 1e-12 {
            continue;
        }
        let (x, y, z) = (v[6] / v[9], v[7] / v[9], v[8] / v[9]);
        let candidate = bx * x + by * y + bz * z + bw;
        let n = candidate.norm();
        if n > 0.0 && n.is_finite() {
            solutions.push(candidate / n);
        }
    }
    solutions
}

/// Closest essential matrix: singular values replaced by `(1, 1, 0)`.
pub fn project_to_essential(e: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = e.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut s = Matrix3::zeros();
    s[(order[0], order[0])] = 1.0;
    s[(order[1], order[1])] = 1.0;
    let out = u * s * v_t;
    out / out.norm()
}

/// Linear least-squares fit over eight or more correspondences.
pub fn eight_point(xi: &[Vector3<f64>], xj: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    if xi.len() < 8 {
        return None;
    }
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, b) in xi.iter().zip(xj) {
        let row = epipolar_row(a, b);
        ata += row * row.transpose();
    }
    let eig = ata.symmetric_eigen();
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let v = eig.eigenvectors.column(min_idx);
    let e = Matrix3::from_fn(|r, c| v[3 * r + c]);
    Some(project_to_essential(&e))
}
