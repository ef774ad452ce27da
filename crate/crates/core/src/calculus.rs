//! Discrete calculus on a [`DomainGrid`].
//!
//! The staggered operators (`gradient`, `divergence`, `laplacian_neumann`)
//! are exact adjoints of each other under the `h^2`-weighted inner products.
//! Cell-centered derivatives (`cell_gradient`, `hessian`) use central stencils
//! where both neighbors exist and second-order one-sided stencils otherwise.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{same_grid, ScalarField, VectorField};
use crate::grid::{Dir, DomainGrid};

/// Symmetric 2x2 tensor stored as `[xx, xy, yy]`.
pub type Sym2 = [f64; 3];

pub fn frobenius(t: Sym2) -> f64 {
    (t[0] * t[0] + 2.0 * t[1] * t[1] + t[2] * t[2]).sqrt()
}

pub fn gradient(f: &ScalarField) -> VectorField {
    let grid = f.grid();
    let mut v = VectorField::zeros(grid);
    grad_into(grid, &f.values, &mut v.x, &mut v.y);
    v
}

pub fn divergence(v: &VectorField) -> ScalarField {
    let grid = v.grid();
    let mut out = vec![0.0; grid.len()];
    div_into(grid, &v.x, &v.y, &mut out);
    ScalarField::new(grid.clone(), out).expect("sizes match")
}

pub fn laplacian_neumann(f: &ScalarField) -> ScalarField {
    let grid = f.grid();
    let mut out = vec![0.0; grid.len()];
    laplacian_into(grid, &f.values, &mut out);
    ScalarField::new(grid.clone(), out).expect("sizes match")
}

/// Face differences `(f_right - f_left) / h`.
pub fn grad_into(grid: &DomainGrid, f: &[f64], gx: &mut [f64], gy: &mut [f64]) {
    let inv_h = 1.0 / grid.h();
    for (g, &[a, b]) in gx.iter_mut().zip(grid.x_faces()) {
        *g = (f[b] - f[a]) * inv_h;
    }
    for (g, &[a, b]) in gy.iter_mut().zip(grid.y_faces()) {
        *g = (f[b] - f[a]) * inv_h;
    }
}

/// Net outflow per cell divided by `h`; overwrites `out`.
pub fn div_into(grid: &DomainGrid, vx: &[f64], vy: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let inv_h = 1.0 / grid.h();
    for (&v, &[a, b]) in vx.iter().zip(grid.x_faces()) {
        out[a] += v * inv_h;
        out[b] -= v * inv_h;
    }
    for (&v, &[a, b]) in vy.iter().zip(grid.y_faces()) {
        out[a] += v * inv_h;
        out[b] -= v * inv_h;
    }
}

/// `div(c grad f)` with face coefficients `cx`, `cy`; overwrites `out`.
pub fn weighted_laplacian_into(
    grid: &DomainGrid,
    cx: &[f64],
    cy: &[f64],
    f: &[f64],
    out: &mut [f64],
) {
    out.fill(0.0);
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    for (&c, &[a, b]) in cx.iter().zip(grid.x_faces()) {
        let flux = c * (f[b] - f[a]) * inv_h2;
        out[a] += flux;
        out[b] -= flux;
    }
    for (&c, &[a, b]) in cy.iter().zip(grid.y_faces()) {
        let flux = c * (f[b] - f[a]) * inv_h2;
        out[a] += flux;
        out[b] -= flux;
    }
}

pub fn laplacian_into(grid: &DomainGrid, f: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    for &[a, b] in grid.x_faces().iter().chain(grid.y_faces()) {
        let flux = (f[b] - f[a]) * inv_h2;
        out[a] += flux;
        out[b] -= flux;
    }
}

/// Arithmetic average of a cell quantity onto the interior faces.
pub fn face_average(grid: &DomainGrid, c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let avg = |faces: &[[usize; 2]]| faces.iter().map(|&[a, b]| 0.5 * (c[a] + c[b])).collect();
    (avg(grid.x_faces()), avg(grid.y_faces()))
}

fn positive(axis: usize) -> Dir {
    if axis == 0 {
        Dir::East
    } else {
        Dir::North
    }
}

/// First derivative along `axis` at cell `k`.
pub fn d1(grid: &DomainGrid, f: &[f64], k: usize, axis: usize) -> f64 {
    let plus = positive(axis);
    let minus = plus.opposite();
    let h = grid.h();
    match (grid.neighbor(k, plus), grid.neighbor(k, minus)) {
        (Some(p), Some(m)) => (f[p] - f[m]) / (2.0 * h),
        (Some(p), None) => match grid.neighbor(p, plus) {
            Some(pp) => (-3.0 * f[k] + 4.0 * f[p] - f[pp]) / (2.0 * h),
            None => (f[p] - f[k]) / h,
        },
        (None, Some(m)) => match grid.neighbor(m, minus) {
            Some(mm) => (3.0 * f[k] - 4.0 * f[m] + f[mm]) / (2.0 * h),
            None => (f[k] - f[m]) / h,
        },
        (None, None) => 0.0,
    }
}

/// Second derivative along `axis` at cell `k`.
pub fn d2(grid: &DomainGrid, f: &[f64], k: usize, axis: usize) -> f64 {
    let plus = positive(axis);
    let minus = plus.opposite();
    let h2 = grid.h() * grid.h();
    if let (Some(p), Some(m)) = (grid.neighbor(k, plus), grid.neighbor(k, minus)) {
        return (f[p] - 2.0 * f[k] + f[m]) / h2;
    }
    for dir in [plus, minus] {
        let line = grid.inward_line(k, dir.opposite(), 4);
        // `inward_line` walks against its direction argument, i.e. along `dir`.
        match line.len() {
            4 => {
                return (2.0 * f[line[0]] - 5.0 * f[line[1]] + 4.0 * f[line[2]] - f[line[3]]) / h2
            }
            3 => return (f[line[0]] - 2.0 * f[line[1]] + f[line[2]]) / h2,
            _ => {}
        }
    }
    0.0
}

/// Cell-centered gradient.
pub fn cell_gradient(f: &ScalarField) -> Vec<[f64; 2]> {
    let grid = f.grid();
    (0..grid.len())
        .map(|k| [d1(grid, &f.values, k, 0), d1(grid, &f.values, k, 1)])
        .collect()
}

/// Cell-centered Hessian `[f_xx, f_xy, f_yy]`. The mixed entry averages the
/// two orders of differentiation, so the tensor is symmetric by construction.
pub fn hessian(f: &ScalarField) -> Vec<Sym2> {
    let grid = f.grid();
    let n = grid.len();
    let gx: Vec<f64> = (0..n).map(|k| d1(grid, &f.values, k, 0)).collect();
    let gy: Vec<f64> = (0..n).map(|k| d1(grid, &f.values, k, 1)).collect();
    (0..n)
        .map(|k| {
            let xy = 0.5 * (d1(grid, &gx, k, 1) + d1(grid, &gy, k, 0));
            [d2(grid, &f.values, k, 0), xy, d2(grid, &f.values, k, 1)]
        })
        .collect()
}

/// Finite-difference weights for derivatives 0, 1, 2 at `z` from nodes `x`.
pub fn fd_weights(z: f64, x: &[f64]) -> Vec<[f64; 3]> {
    let n = x.len();
    let mut c = vec![[0.0; 3]; n];
    if n == 0 {
        return c;
    }
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(2);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c
}

/// Value, gradient and Hessian of a field extrapolated to a boundary point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BoundaryJet {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: Sym2,
}

impl BoundaryJet {
    /// `grad(|grad f|^2) . n = 2 (H grad f) . n`.
    pub fn grad_sq_normal(&self, n: [f64; 2]) -> f64 {
        let [gx, gy] = self.grad;
        let [xx, xy, yy] = self.hess;
        2.0 * ((xx * gx + xy * gy) * n[0] + (xy * gx + yy * gy) * n[1])
    }

    pub fn grad_sq(&self) -> f64 {
        self.grad[0] * self.grad[0] + self.grad[1] * self.grad[1]
    }
}

/// Cell-count floor for the local fits behind boundary jets.
const JET_MIN_CELLS: usize = 26;

/// Monomials `x^a y^b` with `a + b <= 4`, in a fixed order.
const QUARTIC: [(i32, i32); 15] = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3), (4, 0), (3, 1), (2, 2), (1, 3), (0, 4)];

/// Solves the dense system `a x = b` by Gaussian elimination with partial
/// pivoting. `None` if the matrix is numerically singular.
fn dense_solve<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    let scale = a.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    for col in 0..N {
        let piv = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-13 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let tail: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Least-squares quartic through the cells nearest `p`, returned as a jet at `p`.
fn local_quartic_jet(grid: &DomainGrid, vals: &[f64], p: [f64; 2]) -> BoundaryJet {
    let h = grid.h();
    let ci = (p[0] / h).floor() as isize;
    let cj = (p[1] / h).floor() as isize;
    let mut radius: f64 = 3.5;
    loop {
        let reach = radius.ceil() as isize + 1;
        let mut pts: Vec<([f64; 2], f64)> = Vec::new();
        for j in cj - reach..=cj + reach {
            for i in ci - reach..=ci + reach {
                if i < 0 || j < 0 {
                    continue;
                }
                if let Some(k) = grid.index_of(i as usize, j as usize) {
                    let c = grid.center(k);
                    let d = [(c[0] - p[0]) / h, (c[1] - p[1]) / h];
                    if d[0] * d[0] + d[1] * d[1] <= radius * radius {
                        pts.push((d, vals[k]));
                    }
                }
            }
        }
        if pts.len() >= JET_MIN_CELLS || radius > 8.0 {
            let mut ata = [[0.0; 15]; 15];
            let mut atb = [0.0; 15];
            for (d, v) in &pts {
                let row: Vec<f64> = QUARTIC.iter().map(|&(a, b)| d[0].powi(a) * d[1].powi(b)).collect();
                for r in 0..15 {
                    atb[r] += row[r] * v;
                    for c in 0..15 {
                        ata[r][c] += row[r] * row[c];
                    }
                }
            }
            if let Some(c) = dense_solve(ata, atb) {
                return BoundaryJet {
                    value: c[0],
                    grad: [c[1] / h, c[2] / h],
                    hess: [2.0 * c[3] / (h * h), c[4] / (h * h), 2.0 * c[5] / (h * h)],
                };
            }
        }
        if radius > 12.0 {
            return BoundaryJet::default();
        }
        radius += 1.0;
    }
}

/// Extrapolates `f` and its first and second derivatives to every boundary
/// face's crossing point through a local least-squares quartic.
pub fn boundary_jets(f: &ScalarField) -> Vec<BoundaryJet> {
    let grid = f.grid();
    grid.boundary_faces()
        .iter()
        .map(|face| local_quartic_jet(grid, &f.values, face.point))
        .collect()
}

/// `sum_faces weight * value`, for per-face values.
pub fn boundary_integral_faces(grid: &DomainGrid, per_face: &[f64]) -> Result<f64> {
    let faces = grid.boundary_faces();
    if faces.is_empty() {
        return Err(Error::EmptyBoundary);
    }
    if per_face.len() != faces.len() {
        return Err(Error::InvalidShape("one value per boundary face expected".into()));
    }
    Ok(faces.iter().zip(per_face).map(|(f, v)| f.weight * v).sum())
}

/// Boundary integral of a cell field, extrapolated to the boundary points.
pub fn boundary_integral(f: &ScalarField) -> Result<f64> {
    let vals: Vec<f64> = boundary_jets(f).iter().map(|j| j.value).collect();
    boundary_integral_faces(f.grid(), &vals)
}

/// Outward normal derivative of `f` at each boundary face.
pub fn boundary_normal_derivative(f: &ScalarField) -> Vec<f64> {
    let faces = f.grid().boundary_faces();
    boundary_jets(f)
        .iter()
        .zip(faces)
        .map(|(j, face)| j.grad[0] * face.normal[0] + j.grad[1] * face.normal[1])
        .collect()
}

/// Checks that two fields live on the same grid.
pub fn check_same(a: &Arc<DomainGrid>, b: &Arc<DomainGrid>) -> Result<()> {
    same_grid(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(shape: Shape, n: usize) -> Arc<DomainGrid> {
        Arc::new(DomainGrid::build(shape, n).unwrap())
    }

    #[test]
    fn summation_by_parts_on_small_disc() {
        let g = grid(Shape::Disc { radius: 0.4 }, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let f = ScalarField::new(g.clone(), (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let v = VectorField::new(
                g.clone(),
                (0..g.x_faces().len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..g.y_faces().len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let lhs = gradient(&f).inner(&v).unwrap();
            let rhs = f.inner(&divergence(&v)).unwrap();
            assert!((lhs + rhs).abs() <= 1e-12 * (lhs.abs() + 1.0), "{lhs} {rhs}");
        }
    }

    #[test]
    fn constants_are_in_kernel() {
        let g = grid(Shape::Pacman, 32);
        let f = ScalarField::constant(&g, 3.5);
        assert_eq!(gradient(&f).max_abs(), 0.0);
        assert_eq!(laplacian_neumann(&f).max_abs(), 0.0);
    }

    #[test]
    fn quadratic_laplacian_and_hessian() {
        let g = grid(Shape::Square, 16);
        let f = ScalarField::from_fn(&g, |x, y| x * x + y * y);
        let lap = laplacian_neumann(&f);
        let depth = g.depth();
        let hs = hessian(&f);
        for k in 0..g.len() {
            if depth[k] >= 1 {
                assert!((lap.values[k] - 4.0).abs() < 1e-10);
            }
            let h = hs[k];
            assert!((h[0] - 2.0).abs() < 1e-9 && h[1].abs() < 1e-9 && (h[2] - 2.0).abs() < 1e-9, "{h:?}");
        }
        let b = ScalarField::from_fn(&g, |x, y| x * y);
        for h in hessian(&b) {
            assert!(h[0].abs() < 1e-9 && (h[1] - 1.0).abs() < 1e-9 && h[2].abs() < 1e-9);
        }
    }

    #[test]
    fn fd_weights_reproduce_cubics() {
        let nodes = [0.0, -1.0, -2.0, -3.0];
        let z = 0.4;
        let w = fd_weights(z, &nodes);
        let p = |x: f64| 1.0 + 2.0 * x - x * x + 0.5 * x * x * x;
        let (v, d, dd) = nodes.iter().enumerate().fold((0.0, 0.0, 0.0), |acc, (i, &x)| {
            (acc.0 + w[i][0] * p(x), acc.1 + w[i][1] * p(x), acc.2 + w[i][2] * p(x))
        });
        assert!((v - p(z)).abs() < 1e-12);
        assert!((d - (2.0 - 2.0 * z + 1.5 * z * z)).abs() < 1e-12);
        assert!((dd - (-2.0 + 3.0 * z)).abs() < 1e-12);
    }

    #[test]
    fn boundary_integral_of_one_is_perimeter() {
        let g = grid(Shape::Disc { radius: 0.4 }, 64);
        let one = ScalarField::constant(&g, 1.0);
        let total = boundary_integral(&one).unwrap();
        assert!((total / (2.0 * std::f64::consts::PI * 0.4) - 1.0).abs() < 0.03);
        let zero = ScalarField::zeros(&g);
        assert_eq!(boundary_integral(&zero).unwrap(), 0.0);
    }

    #[test]
    fn boundary_jets_recover_smooth_data() {
        let g = grid(Shape::Disc { radius: 0.4 }, 64);
        let f = ScalarField::from_fn(&g, |x, y| (2.0 * x).sin() * (1.5 * y).cos());
        for (jet, face) in boundary_jets(&f).iter().zip(g.boundary_faces()) {
            let [x, y] = face.point;
            let exact = (2.0 * x).sin() * (1.5 * y).cos();
            let gx = 2.0 * (2.0 * x).cos() * (1.5 * y).cos();
            assert!((jet.value - exact).abs() < 1e-5);
            // One-sided tangential stencils near corners are second order.
            assert!((jet.grad[0] - gx).abs() < 5e-3, "{} vs {}", jet.grad[0], gx);
        }
    }
}
