//! Random band-limited test fields and the boundary/Hessian inequality checks
//! built on them: the boundary curvature constant, Kato's inequality, the
//! Bochner identity, the Hessian bound with boundary correction, and the
//! trace constant used in the contraction rate.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calculus::{boundary_jets, cell_gradient, frobenius, hessian};
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::grid::DomainGrid;
use crate::mobility::sigma_bound;
use crate::shape::Shape;

/// `sum a cos(k pi x) cos(l pi y)` over a set of modes; Neumann on the unit box.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineSeries {
    pub terms: Vec<(u32, u32, f64)>,
    /// Added constant, kept out of the modes so the no-flux projection sees only
    /// the varying part.
    pub offset: f64,
}

impl CosineSeries {
    /// All modes with `k + l <= max_mode` and uniform amplitudes damped by
    /// `(1 + k^2 + l^2)^-decay`, excluding the constant mode.
    pub fn random(rng: &mut impl Rng, max_mode: u32, decay: f64) -> Self {
        let mut terms = Vec::new();
        for k in 0..=max_mode {
            for l in 0..=(max_mode - k) {
                if k + l == 0 {
                    continue;
                }
                let a: f64 = rng.gen_range(-1.0..1.0);
                terms.push((k, l, a * (1.0 + (k * k + l * l) as f64).powf(-decay)));
            }
        }
        CosineSeries { terms, offset: 0.0 }
    }

    pub fn eval(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let mut v = self.offset;
        let mut g = [0.0; 2];
        for &(k, l, a) in &self.terms {
            let (kx, ly) = (k as f64 * PI, l as f64 * PI);
            let (cx, sx) = ((kx * p[0]).cos(), (kx * p[0]).sin());
            let (cy, sy) = ((ly * p[1]).cos(), (ly * p[1]).sin());
            v += a * cx * cy;
            g[0] -= a * kx * sx * cy;
            g[1] -= a * ly * cx * sy;
        }
        (v, g)
    }
}

/// Default width of the band near the boundary where the no-flux correction acts.
const PROJECTION_BAND: f64 = 0.12;

/// Fraction of the local boundary radius used as band width on star-shaped
/// domains. Wide bands keep the corrected fields smooth at grid scale.
const RADIAL_BAND: f64 = 0.75;

/// Radii between which the correction is switched on near the pacman center,
/// away from the steep angular structure of its level function.
const PACMAN_CORE: (f64, f64) = (0.05, 0.14);

fn band(shape: Shape, p: [f64; 2], f: f64) -> f64 {
    let r = (p[0] - 0.5).hypot(p[1] - 0.5);
    match shape {
        Shape::Disc { .. } | Shape::Pacman => RADIAL_BAND * (r - f),
        _ => PROJECTION_BAND,
    }
}

/// Smooth step from 0 at `a` to 1 at `b`.
fn smooth_step(x: f64, a: f64, b: f64) -> f64 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

fn core_factor(shape: Shape, p: [f64; 2]) -> f64 {
    match shape {
        Shape::Pacman => smooth_step((p[0] - 0.5).hypot(p[1] - 0.5), PACMAN_CORE.0, PACMAN_CORE.1),
        _ => 1.0,
    }
}

fn cutoff(f: f64, width: f64) -> f64 {
    let s = f / width;
    if s.abs() >= 1.0 {
        0.0
    } else {
        let t = 1.0 - s * s;
        t * t * t
    }
}

/// `w - chi(F) F (grad w . grad F) / |grad F|^2` at `p`, with `F` the shape's
/// level function. The result has zero normal derivative on the analytic
/// boundary. The unit square needs no correction.
pub fn projected_value(shape: Shape, w: &CosineSeries, p: [f64; 2]) -> f64 {
    let (v, g) = w.eval(p);
    if shape == Shape::Square {
        return v;
    }
    let (f, gf) = shape.level(p);
    let n2 = gf[0] * gf[0] + gf[1] * gf[1];
    if n2 == 0.0 {
        return v;
    }
    v - core_factor(shape, p) * cutoff(f, band(shape, p, f)) * f * (g[0] * gf[0] + g[1] * gf[1]) / n2
}

/// Samples [`projected_value`] at cell centers.
pub fn neumann_projected(grid: &Arc<DomainGrid>, w: &CosineSeries) -> Result<ScalarField> {
    let shape = grid
        .shape()
        .ok_or_else(|| Error::Invalid("no-flux projection needs an analytic shape".into()))?;
    Ok(ScalarField::from_fn(grid, |x, y| projected_value(shape, w, [x, y])))
}

/// A reproducible family of random fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Battery {
    pub seed: u64,
    pub n_samples: usize,
    pub max_mode: u32,
    pub decay: f64,
}

impl Default for Battery {
    fn default() -> Self {
        Battery { seed: 7, n_samples: 100, max_mode: 2, decay: 1.0 }
    }
}

impl Battery {
    pub fn fields(&self) -> Vec<CosineSeries> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_samples).map(|_| CosineSeries::random(&mut rng, self.max_mode, self.decay)).collect()
    }

    /// Fields sampled on `grid` with the no-flux projection applied.
    pub fn sample(&self, grid: &Arc<DomainGrid>) -> Result<Vec<ScalarField>> {
        self.fields().par_iter().map(|w| neumann_projected(grid, w)).collect()
    }
}

/// Faces whose `|grad w|^2` is below this fraction of the sample's largest
/// boundary value are skipped in the ratio.
pub const RATIO_SKIP: f64 = 5e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma21Estimate {
    /// `max(0, max ratio)`: the empirical constant.
    pub c_omega: f64,
    /// Signed extremes of `grad(|grad w|^2) . n / |grad w|^2`.
    pub max_ratio: f64,
    pub min_ratio: f64,
    pub faces_used: usize,
    pub samples: usize,
}

/// Ratio `grad(|grad w|^2) . n / |grad w|^2` at each retained boundary face.
pub fn boundary_ratios(w: &ScalarField) -> Vec<f64> {
    let faces = w.grid().boundary_faces();
    let jets = boundary_jets(w);
    let top = jets.iter().map(|j| j.grad_sq()).fold(0.0, f64::max);
    if top <= 0.0 {
        return Vec::new();
    }
    jets.iter()
        .zip(faces)
        .filter(|(j, _)| j.grad_sq() > RATIO_SKIP * top)
        .map(|(j, f)| j.grad_sq_normal(f.normal) / j.grad_sq())
        .collect()
}

pub fn lemma21_estimate(grid: &Arc<DomainGrid>, battery: &Battery) -> Result<Lemma21Estimate> {
    let fields = battery.sample(grid)?;
    let ratios: Vec<Vec<f64>> = fields.par_iter().map(boundary_ratios).collect();
    let all: Vec<f64> = ratios.into_iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::Invalid("every sample is degenerate on the boundary".into()));
    }
    let max_ratio = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_ratio = all.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(Lemma21Estimate {
        c_omega: max_ratio.max(0.0),
        max_ratio,
        min_ratio,
        faces_used: all.len(),
        samples: fields.len(),
    })
}

/// Per-cell `|grad |grad w|| - |hess w|`.
pub fn kato_gap(w: &ScalarField) -> Vec<f64> {
    let g = cell_gradient(w);
    let norm = ScalarField::new(w.grid().clone(), g.iter().map(|v| v[0].hypot(v[1])).collect())
        .expect("same grid");
    let gn = cell_gradient(&norm);
    let h = hessian(w);
    gn.iter().zip(&h).map(|(a, hh)| a[0].hypot(a[1]) - frobenius(*hh)).collect()
}

/// Cells touching the outside use one-sided stencils whose Hessian is only
/// first order on a staircase boundary; the check skips them.
pub const KATO_DEPTH: usize = 1;

/// Largest violation of `|grad |grad w|| <= |hess w|` over cells at depth at
/// least [`KATO_DEPTH`], zero when it holds there.
pub fn kato_check(w: &ScalarField) -> f64 {
    let depth = w.grid().depth();
    kato_gap(w)
        .into_iter()
        .zip(depth)
        .filter(|&(_, d)| d >= KATO_DEPTH)
        .fold(0.0, |m, (v, _)| m.max(v))
}

pub fn kato_battery(grid: &Arc<DomainGrid>, battery: &Battery) -> Result<f64> {
    let fields = battery.sample(grid)?;
    Ok(fields.par_iter().map(kato_check).collect::<Vec<_>>().into_iter().fold(0.0, f64::max))
}

/// `-Delta(|grad phi|^2 / 2) + grad phi . grad(Delta phi) + |hess phi|^2`, which
/// vanishes identically in the continuum.
pub fn bochner_residual(phi: &ScalarField) -> ScalarField {
    let grid = phi.grid();
    let g = cell_gradient(phi);
    let h = hessian(phi);
    let q = ScalarField::new(grid.clone(), g.iter().map(|v| 0.5 * (v[0] * v[0] + v[1] * v[1])).collect())
        .expect("same grid");
    let lap = ScalarField::new(grid.clone(), h.iter().map(|t| t[0] + t[2]).collect()).expect("same grid");
    let hq = hessian(&q);
    let glap = cell_gradient(&lap);
    let vals = (0..grid.len())
        .map(|k| {
            let f = frobenius(h[k]);
            -(hq[k][0] + hq[k][2]) + g[k][0] * glap[k][0] + g[k][1] * glap[k][1] + f * f
        })
        .collect();
    ScalarField::new(grid.clone(), vals).expect("same grid")
}

/// Cells at least `depth` cells away from the boundary layer.
pub fn deep_cells(grid: &DomainGrid, depth: usize) -> Vec<usize> {
    grid.depth().iter().enumerate().filter(|(_, &d)| d >= depth).map(|(k, _)| k).collect()
}

/// Root-mean-square of `f` over the listed cells.
pub fn rms_over(f: &ScalarField, cells: &[usize]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    (cells.iter().map(|&k| f.values[k] * f.values[k]).sum::<f64>() / cells.len() as f64).sqrt()
}

/// Depth used for "interior" Bochner statistics; stencils there are central.
pub const BOCHNER_DEPTH: usize = 4;

/// Largest interior RMS Bochner residual over the battery, with the fields
/// normalized to unit maximal Hessian so the statistic is scale free.
pub fn bochner_battery(grid: &Arc<DomainGrid>, battery: &Battery) -> Result<f64> {
    let cells = deep_cells(grid, BOCHNER_DEPTH);
    let fields = battery.sample(grid)?;
    Ok(fields
        .par_iter()
        .map(|f| {
            let scale = hessian(f).iter().map(|t| frobenius(*t)).fold(0.0, f64::max).max(1e-300);
            rms_over(&bochner_residual(f), &cells) / (scale * scale)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0, f64::max))
}

/// The three integrals of the Hessian bound: `int |hess f|^2`, `int (Delta f)^2`
/// and `||f||^2_{H^1}`.
pub fn hessian_integrals(f: &ScalarField) -> (f64, f64, f64) {
    let h2 = f.grid().cell_area();
    let hs = hessian(f);
    let g = cell_gradient(f);
    let mut hess = 0.0;
    let mut lap = 0.0;
    let mut h1 = 0.0;
    for k in 0..f.len() {
        let fr = frobenius(hs[k]);
        hess += fr * fr;
        let l = hs[k][0] + hs[k][2];
        lap += l * l;
        h1 += f.values[k] * f.values[k] + g[k][0] * g[k][0] + g[k][1] * g[k][1];
    }
    (hess * h2, lap * h2, h1 * h2)
}

/// Slack `2 int (Delta f)^2 + C ||f||^2_{H^1} - int |hess f|^2`.
pub fn lemma47_check(f: &ScalarField, c: f64) -> f64 {
    let (hess, lap, h1) = hessian_integrals(f);
    2.0 * lap + c * h1 - hess
}

/// Smallest `C` for which the bound holds on every battery field (may be
/// negative when it holds with room to spare).
pub fn lemma47_best_c(grid: &Arc<DomainGrid>, battery: &Battery) -> Result<f64> {
    let fields = battery.sample(grid)?;
    let ratios: Vec<f64> = fields
        .par_iter()
        .map(|f| {
            let f = f.zero_mean();
            let (hess, lap, h1) = hessian_integrals(&f);
            (hess - 2.0 * lap) / h1
        })
        .collect();
    Ok(ratios.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// `max_g ||g||^2_{L^2(boundary)} / (sigma ||grad g||^2 + ||g||^2 / sigma)` over
/// fields without any boundary condition (including a constant offset).
pub fn trace_ratio(grid: &Arc<DomainGrid>, battery: &Battery, sigma: f64) -> Result<f64> {
    let parts = trace_parts(grid, battery)?;
    Ok(trace_ratio_from(&parts, sigma))
}

fn trace_parts(grid: &Arc<DomainGrid>, battery: &Battery) -> Result<Vec<[f64; 3]>> {
    let mut fields = battery.fields();
    let mut rng = ChaCha8Rng::seed_from_u64(battery.seed ^ 0x5eed);
    for f in &mut fields {
        f.offset = rng.gen_range(-1.0..1.0);
    }
    fields.push(CosineSeries { terms: Vec::new(), offset: 1.0 });
    let faces = grid.boundary_faces();
    if faces.is_empty() {
        return Err(Error::EmptyBoundary);
    }
    Ok(fields
        .par_iter()
        .map(|w| {
            let f = ScalarField::from_fn(grid, |x, y| w.eval([x, y]).0);
            let jets = boundary_jets(&f);
            let bnd: f64 = jets.iter().zip(faces).map(|(j, fc)| fc.weight * j.value * j.value).sum();
            let g = cell_gradient(&f);
            let h2 = grid.cell_area();
            let grad: f64 = g.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>() * h2;
            let l2: f64 = f.values.iter().map(|v| v * v).sum::<f64>() * h2;
            [bnd, grad, l2]
        })
        .collect())
}

fn trace_ratio_from(parts: &[[f64; 3]], sigma: f64) -> f64 {
    parts.iter().map(|[b, g, l]| b / (sigma * g + l / sigma)).fold(0.0, f64::max)
}

/// Measured constants entering the contraction rate.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryConstants {
    pub c_omega: f64,
    /// Trace ratio `K(sigma)` at the chosen `sigma`.
    pub trace: f64,
    pub sigma: f64,
    /// `C = C_Omega K(sigma)`, the constant multiplying `delta / sigma`.
    pub c: f64,
    /// `C_Omega K(sigma)`, also the constant in the admissibility bound on `sigma`.
    pub c_tilde: Option<f64>,
}

/// Chooses `sigma` with `sigma C_Omega K(sigma) = min(1, 1/R) / 2`, half the
/// admissibility bound, and returns the resulting constants. A nonpositive
/// `C_Omega` means the boundary term needs no control: `C = 0`.
pub fn estimate_constants(grid: &Arc<DomainGrid>, battery: &Battery, r_const: f64) -> Result<BoundaryConstants> {
    let est = lemma21_estimate(grid, battery)?;
    if est.c_omega <= 0.0 {
        return Ok(BoundaryConstants { c_omega: 0.0, trace: 0.0, sigma: 1.0, c: 0.0, c_tilde: None });
    }
    let parts = trace_parts(grid, battery)?;
    let target = 0.5 * sigma_bound(1.0, r_const);
    // sigma K(sigma) is increasing in sigma.
    let f = |s: f64| s * est.c_omega * trace_ratio_from(&parts, s) - target;
    let (mut lo, mut hi) = (1e-12, 1.0);
    while f(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Invalid("trace ratio does not grow with sigma".into()));
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = lo;
    let trace = trace_ratio_from(&parts, sigma);
    let c = est.c_omega * trace;
    Ok(BoundaryConstants { c_omega: est.c_omega, trace, sigma, c, c_tilde: Some(c) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(shape: Shape, n: usize) -> Arc<DomainGrid> {
        Arc::new(DomainGrid::build(shape, n).unwrap())
    }

    #[test]
    fn projection_kills_normal_derivative() {
        let g = grid(Shape::Pacman, 64);
        let w = Battery { n_samples: 1, ..Battery::default() }.fields().pop().unwrap();
        let shape = g.shape().unwrap();
        // Analytic check at boundary points: grad w~ . grad F = 0 by finite differences.
        for face in g.boundary_faces().iter().step_by(7) {
            let p = face.point;
            let eval = |q: [f64; 2]| projected_value(shape, &w, q);
            let e = 1e-6;
            let n = face.normal;
            let dn = (eval([p[0] + e * n[0], p[1] + e * n[1]]) - eval([p[0] - e * n[0], p[1] - e * n[1]])) / (2.0 * e);
            assert!(dn.abs() < 1e-5, "{dn}");
        }
    }

    #[test]
    fn kato_examples() {
        let g = grid(Shape::Square, 32);
        let lin = ScalarField::from_fn(&g, |x, y| 2.0 * x - y);
        assert!(kato_check(&lin) < 1e-9);
        let quad = ScalarField::from_fn(&g, |x, y| x * x + y * y);
        let gap = kato_gap(&quad);
        let deep = deep_cells(&g, 2);
        for &k in deep.iter().filter(|&&k| {
            let [x, y] = g.center(k);
            x.hypot(y) > 0.3
        }) {
            // |grad |grad w|| = 2 and |hess w| = 2 sqrt 2; differencing |grad w| = 2r costs O(h^2 / r^2).
            assert!((gap[k] - (2.0 - 2.0 * 2f64.sqrt())).abs() < 1e-2, "{}", gap[k]);
        }
    }

    #[test]
    fn bochner_exact_for_quadratics() {
        let g = grid(Shape::Disc { radius: 0.45 }, 32);
        let phi = ScalarField::from_fn(&g, |x, y| 0.7 * x * x - 0.3 * x * y + 1.1 * y * y + x);
        let r = bochner_residual(&phi);
        for k in deep_cells(&g, BOCHNER_DEPTH) {
            assert!(r.values[k].abs() < 1e-8, "{}", r.values[k]);
        }
        let lin = ScalarField::from_fn(&g, |x, y| 3.0 * x + y);
        assert!(bochner_residual(&lin).max_abs() < 1e-8);
    }

    #[test]
    fn lemma47_constant_field() {
        let g = grid(Shape::Pacman, 32);
        let f = ScalarField::constant(&g, 2.0);
        assert!(lemma47_check(&f, 0.1) > 0.0);
    }

    #[test]
    fn square_boundary_ratio_is_small_disc_is_curvature() {
        let b = Battery { n_samples: 20, ..Battery::default() };
        let sq = lemma21_estimate(&grid(Shape::Square, 64), &b).unwrap();
        assert!(sq.max_ratio.abs() <= 5.0 / 64.0 && sq.min_ratio.abs() <= 5.0 / 64.0, "{sq:?}");
        let r = 0.4;
        let disc = lemma21_estimate(&grid(Shape::Disc { radius: r }, 64), &b).unwrap();
        // Tangential gradients on a circle give exactly -2/r.
        let mid = 0.5 * (disc.max_ratio + disc.min_ratio);
        assert!(mid.abs() > 1.0 / r && mid.abs() < 4.0 / r, "{disc:?}");
        assert!(disc.max_ratio < 0.0);
    }

    #[test]
    fn trace_ratio_of_constant_matches_geometry() {
        let g = grid(Shape::Disc { radius: 0.4 }, 64);
        let b = Battery { n_samples: 0, ..Battery::default() };
        let k = trace_ratio(&g, &b, 0.5).unwrap();
        // Constant field: perimeter / (area / sigma) = 2 sigma / r.
        assert!((k - 2.0 * 0.5 / 0.4).abs() < 0.1, "{k}");
    }
}
