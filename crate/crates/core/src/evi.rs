//! The contraction machinery along a curve of densities: the flowed curve
//! `rho^h(z) = S_{hz} rho(z)`, its velocity potential, the action `A^h`, the
//! functional `F`, the five-term decomposition of `A_h / 2 + F_z`, and
//! step-level checks of the evolution variational inequality.

use std::sync::Arc;

use crate::battery::{bochner_residual, estimate_constants, projected_value, Battery, BoundaryConstants, CosineSeries};
use crate::calculus::{boundary_jets, cell_gradient, frobenius, grad_into, hessian, Sym2};
use crate::error::{Error, Result};
use crate::field::{same_grid, ScalarField};
use crate::grid::DomainGrid;
use crate::kernels::{face_mobility, semigroup_step, weighted_elliptic_solve, SemigroupParams};
use crate::mobility::{EntropyDensity, LambdaInputs, RegularizedMobility};
use crate::transport::{wm_distance, TransportSolveOptions};

/// A smooth confining potential sampled at cell centers together with its
/// exact first and second derivatives.
#[derive(Debug, Clone)]
pub struct Potential {
    pub values: ScalarField,
    pub grad: Vec<[f64; 2]>,
    pub hess: Vec<Sym2>,
    /// `sup |grad phi|` over cell centers and boundary points.
    pub grad_inf: f64,
    /// `sup |hess phi|` (Frobenius) over the same points.
    pub hess_inf: f64,
}

const POTENTIAL_STEP: f64 = 1e-4;

impl Potential {
    pub fn zero(grid: &Arc<DomainGrid>) -> Self {
        let n = grid.len();
        Potential {
            values: ScalarField::zeros(grid),
            grad: vec![[0.0; 2]; n],
            hess: vec![[0.0; 3]; n],
            grad_inf: 0.0,
            hess_inf: 0.0,
        }
    }

    /// Samples an analytic potential; derivatives by central differences of
    /// the closure at a step far below the grid spacing.
    pub fn from_fn(grid: &Arc<DomainGrid>, f: impl Fn([f64; 2]) -> f64) -> Self {
        let e = POTENTIAL_STEP;
        let jet = |p: [f64; 2]| -> ([f64; 2], Sym2) {
            let c = f(p);
            let (xp, xm) = (f([p[0] + e, p[1]]), f([p[0] - e, p[1]]));
            let (yp, ym) = (f([p[0], p[1] + e]), f([p[0], p[1] - e]));
            let xy = (f([p[0] + e, p[1] + e]) - f([p[0] + e, p[1] - e]) - f([p[0] - e, p[1] + e])
                + f([p[0] - e, p[1] - e]))
                / (4.0 * e * e);
            (
                [(xp - xm) / (2.0 * e), (yp - ym) / (2.0 * e)],
                [(xp - 2.0 * c + xm) / (e * e), xy, (yp - 2.0 * c + ym) / (e * e)],
            )
        };
        let values = ScalarField::from_fn(grid, |x, y| f([x, y]));
        let (grad, hess): (Vec<_>, Vec<_>) = (0..grid.len()).map(|k| jet(grid.center(k))).unzip();
        let mut grad_inf: f64 = 0.0;
        let mut hess_inf: f64 = 0.0;
        let edge = grid.boundary_faces().iter().map(|fc| jet(fc.point));
        for (g, h) in grad.iter().copied().zip(hess.iter().copied()).chain(edge) {
            grad_inf = grad_inf.max(g[0].hypot(g[1]));
            hess_inf = hess_inf.max(frobenius(h));
        }
        Potential { values, grad, hess, grad_inf, hess_inf }
    }

    /// `scale` times a cosine series made no-flux on the grid's shape.
    pub fn projected_cosine(grid: &Arc<DomainGrid>, series: &CosineSeries, scale: f64) -> Result<Self> {
        let shape = grid
            .shape()
            .ok_or_else(|| Error::Invalid("potential needs an analytic shape".into()))?;
        Ok(Self::from_fn(grid, |p| scale * projected_value(shape, series, p)))
    }
}

/// A curve of probability densities, piecewise linear between slices.
#[derive(Debug, Clone)]
pub struct CurveSpec {
    pub z_nodes: Vec<f64>,
    pub slices: Vec<ScalarField>,
}

const MASS_TOL: f64 = 1e-8;

impl CurveSpec {
    pub fn new(z_nodes: Vec<f64>, slices: Vec<ScalarField>) -> Result<Self> {
        if z_nodes.len() < 2 || z_nodes.len() != slices.len() {
            return Err(Error::Invalid("a curve needs at least two slices, one per z node".into()));
        }
        if z_nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("z nodes must increase strictly".into()));
        }
        for s in &slices {
            same_grid(s.grid(), slices[0].grid())?;
            if s.min() < 0.0 {
                return Err(Error::NegativeDensity(s.min()));
            }
            let mass = s.mass();
            if (mass - 1.0).abs() > MASS_TOL {
                return Err(Error::MassMismatch { mass0: mass, mass1: 1.0, gap: (mass - 1.0).abs() });
            }
        }
        Ok(CurveSpec { z_nodes, slices })
    }

    /// `(1 - z) a + z b` on `[0, 1]`, with both ends normalized to unit mass.
    pub fn mixture(a: &ScalarField, b: &ScalarField) -> Result<Self> {
        Self::new(vec![0.0, 1.0], vec![a.normalized()?, b.normalized()?])
    }

    pub fn range(&self) -> (f64, f64) {
        (self.z_nodes[0], *self.z_nodes.last().expect("two nodes"))
    }

    pub fn grid(&self) -> &Arc<DomainGrid> {
        self.slices[0].grid()
    }

    pub fn at(&self, z: f64) -> Result<ScalarField> {
        let (lo, hi) = self.range();
        if !(z >= lo && z <= hi) {
            return Err(Error::OutOfRange { name: "z", value: z, constraint: "z within the curve's node range" });
        }
        let i = self.z_nodes.partition_point(|&n| n <= z).clamp(1, self.z_nodes.len() - 1);
        let (z0, z1) = (self.z_nodes[i - 1], self.z_nodes[i]);
        let t = (z - z0) / (z1 - z0);
        self.slices[i - 1].axpby(1.0 - t, &self.slices[i], t)
    }
}

/// `floor + exp(-|x - c|^2 / (2 w^2))` normalized to unit mass.
pub fn smooth_bump(grid: &Arc<DomainGrid>, center: [f64; 2], width: f64, floor: f64) -> Result<ScalarField> {
    ScalarField::from_fn(grid, |x, y| {
        let d2 = (x - center[0]).powi(2) + (y - center[1]).powi(2);
        floor + (-d2 / (2.0 * width * width)).exp()
    })
    .normalized()
}

/// Problem data shared by all evaluations: mobility, diffusion, potential,
/// entropy and the measured constants behind `lambda_delta`.
#[derive(Debug, Clone)]
pub struct EviSetup {
    pub reg: RegularizedMobility,
    pub delta: f64,
    pub potential: Potential,
    pub entropy: EntropyDensity,
    pub constants: BoundaryConstants,
    /// Contraction rate; may be overridden after construction.
    pub lambda: f64,
    /// Largest internal semigroup step.
    pub dt: f64,
    /// Base `z` step of the central differences.
    pub dz: f64,
    /// `h` step as a fraction of `h`.
    pub dh_frac: f64,
    pub elliptic_tol: f64,
}

/// `h` step used at `h = 0`.
pub const H_START_STEP: f64 = 2e-3;

/// Richardson guard: coarse and fine differences may disagree by this much.
pub const RICHARDSON_GUARD: f64 = 0.1;

impl EviSetup {
    /// Measures the boundary constants on `battery` and assembles `lambda_delta`.
    pub fn new(reg: RegularizedMobility, delta: f64, potential: Potential, battery: &Battery) -> Result<Self> {
        let grid = potential.values.grid().clone();
        let sup = reg.sup_constants()?;
        let constants = estimate_constants(&grid, battery, sup.r)?;
        Self::with_constants(reg, delta, potential, constants)
    }

    pub fn with_constants(
        reg: RegularizedMobility,
        delta: f64,
        potential: Potential,
        constants: BoundaryConstants,
    ) -> Result<Self> {
        let grid = potential.values.grid().clone();
        let lambda = reg.lambda_delta(LambdaInputs {
            delta,
            grad_phi_inf: potential.grad_inf,
            hess_phi_inf: potential.hess_inf,
            sigma: constants.sigma,
            c_trace: constants.c,
            c_tilde: constants.c_tilde,
        })?;
        let entropy = EntropyDensity::build(reg, grid.area(), 4096)?;
        Ok(EviSetup {
            reg,
            delta,
            potential,
            entropy,
            constants,
            lambda,
            dt: 2e-4,
            dz: 0.02,
            dh_frac: 0.25,
            elliptic_tol: 1e-11,
        })
    }

    /// Semigroup parameters with one substep count for every time up to
    /// `t_max`, so that `S_t` is a smooth function of `t` on that range.
    pub fn semigroup(&self, t_max: f64) -> SemigroupParams {
        let grid = self.potential.values.grid();
        let mut vx = vec![0.0; grid.x_faces().len()];
        let mut vy = vec![0.0; grid.y_faces().len()];
        grad_into(grid, &self.potential.values.values, &mut vx, &mut vy);
        let vmax = vx.iter().chain(&vy).fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut step = self.dt;
        if vmax > 0.0 {
            step = step.min(grid.h() / (2.0 * self.reg.lipschitz() * vmax));
        }
        let n = ((t_max * (1.0 + 1e-9)) / step).ceil().max(1.0) as usize;
        SemigroupParams {
            delta: self.delta,
            phi: self.potential.values.clone(),
            reg: self.reg,
            dt: f64::INFINITY,
            substeps: Some(n),
        }
    }

    pub fn functional(&self, u: &ScalarField) -> Result<f64> {
        functional_f(u, &self.potential.values, self.delta, &self.entropy)
    }
}

/// The flowed slice, its `z` derivative and velocity potential.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub rho: ScalarField,
    pub drho_dz: ScalarField,
    pub phi: ScalarField,
    /// Relative residual of the elliptic solve.
    pub residual: f64,
}

const ROUNDOFF_MASS: f64 = 1e-12;

fn richardson_pair(coarse: f64, fine: f64) -> f64 {
    (4.0 * fine - coarse) / 3.0
}

/// Builds `rho^h(z) = S_{hz} rho(z)`, `d_z rho^h` by Richardson-extrapolated
/// central differences of step `dz` (each neighbour evolved by its own
/// `S_{hz'}`), and `phi^h` solving `-div(m_eps(rho^h) grad phi^h) = d_z rho^h`.
pub fn build_flow_state(
    curve: &CurveSpec,
    params: &SemigroupParams,
    z: f64,
    h: f64,
    dz: f64,
    tol: f64,
) -> Result<FlowState> {
    if !(0.0..1.0).contains(&h) {
        return Err(Error::OutOfRange { name: "h", value: h, constraint: "0≤h<1" });
    }
    let (lo, hi) = curve.range();
    if !(z - dz >= lo && z + dz <= hi) {
        return Err(Error::OutOfRange { name: "z", value: z, constraint: "z±dz inside the curve range" });
    }
    let flow = |zz: f64| -> Result<ScalarField> { semigroup_step(&curve.at(zz)?, params, h * zz) };
    let rho = flow(z)?;
    let diff = |step: f64| -> Result<ScalarField> {
        let (p, m) = (flow(z + step)?, flow(z - step)?);
        p.axpby(1.0 / (2.0 * step), &m, -1.0 / (2.0 * step))
    };
    let coarse = diff(dz)?;
    let fine = diff(0.5 * dz)?;
    let mut drho_dz = coarse.zip_map(&fine, richardson_pair)?;
    // Each slice has unit mass, so the integral of the difference is roundoff.
    if drho_dz.integral().abs() <= ROUNDOFF_MASS / dz {
        drho_dz = drho_dz.zero_mean();
    }
    let sol = weighted_elliptic_solve(&rho, &drho_dz, &params.reg, tol)?;
    if sol.residual_norm > 1e-8 {
        return Err(Error::NotConverged { solver: "elliptic", iterations: sol.iterations, residual: sol.residual_norm });
    }
    Ok(FlowState { rho, drho_dz, phi: sol.phi, residual: sol.residual_norm })
}

/// `A = int m_eps(rho) |grad phi|^2`, with the face mobilities of the
/// elliptic operator so that `A = <d_z rho, phi>` holds discretely.
pub fn action_a(rho: &ScalarField, phi: &ScalarField, reg: &RegularizedMobility) -> Result<f64> {
    same_grid(rho.grid(), phi.grid())?;
    let grid = rho.grid();
    let (cx, cy) = face_mobility(rho, reg);
    let h = grid.h();
    let mut total = 0.0;
    for (faces, c) in [(grid.x_faces(), &cx), (grid.y_faces(), &cy)] {
        for (&[a, b], &m) in faces.iter().zip(c.iter()) {
            let g = (phi.values[b] - phi.values[a]) / h;
            total += m * g * g;
        }
    }
    Ok(total * grid.cell_area())
}

/// `F(u) = int u phi + delta int U_eps(u)`.
pub fn functional_f(u: &ScalarField, phi: &ScalarField, delta: f64, entropy: &EntropyDensity) -> Result<f64> {
    same_grid(u.grid(), phi.grid())?;
    let mut total = 0.0;
    for (&r, &p) in u.values.iter().zip(&phi.values) {
        total += r * p + delta * entropy.value(r.max(0.0))?;
    }
    Ok(total * u.grid().cell_area())
}

/// A central difference with its Richardson companion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivative {
    pub coarse: f64,
    pub fine: f64,
    pub extrapolated: f64,
    /// `|extrapolated - fine|`, the estimated error of the fine difference.
    pub error: f64,
    /// `|coarse - fine| / |fine|`.
    pub disagreement: f64,
}

fn derivative(
    f: &mut dyn FnMut(f64) -> Result<f64>,
    x: f64,
    step: f64,
    floor: f64,
    what: &'static str,
) -> Result<Derivative> {
    let guard = |gap: f64, reference: f64| -> Result<f64> {
        let d = if gap <= 1e-3 * floor { 0.0 } else { gap / reference.abs().max(floor) };
        if d > RICHARDSON_GUARD {
            return Err(Error::StepTooLarge { what, disagreement: d });
        }
        Ok(d)
    };
    if x - step < 0.0 {
        // Forward differences at a left end point; the first-order error is
        // removed before comparing, so a vanishing slope is not penalized.
        let f0 = f(x)?;
        let mut fwd = |s: f64| -> Result<f64> { Ok((f(x + s)? - f0) / s) };
        let (d1, d2, d4) = (fwd(step)?, fwd(0.5 * step)?, fwd(0.25 * step)?);
        let (coarse, fine) = (2.0 * d2 - d1, 2.0 * d4 - d2);
        let disagreement = guard((coarse - fine).abs(), fine.abs().max(d1.abs()))?;
        return Ok(Derivative { coarse, fine, extrapolated: fine, error: (coarse - fine).abs(), disagreement });
    }
    let mut central = |s: f64| -> Result<f64> { Ok((f(x + s)? - f(x - s)?) / (2.0 * s)) };
    let (coarse, fine) = (central(step)?, central(0.5 * step)?);
    let disagreement = guard((coarse - fine).abs(), fine)?;
    let extrapolated = richardson_pair(coarse, fine);
    Ok(Derivative { coarse, fine, extrapolated, error: (extrapolated - fine).abs(), disagreement })
}

/// The five terms of the decomposition and the bounds they are compared to.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Terms {
    pub j: [f64; 5],
    /// `z int m |m''| |grad phi| |grad phi^h|^2 |grad rho|`.
    pub j3_bound: f64,
    /// `z |hess phi|_inf int m |m'| |grad phi^h|^2`.
    pub j4_bound: f64,
    /// `(delta z / 2) C_Omega int_boundary m |grad phi^h|^2`.
    pub j5_bound: f64,
    /// `z delta int m [-Delta(|grad phi^h|^2 / 2) + grad phi^h . grad Delta phi^h]`,
    /// the undifferentiated form of `J2`.
    pub j2_bracket: f64,
}

/// Evaluates `J1..J5` by cellwise quadrature at one flowed slice.
pub fn j_terms(state: &FlowState, setup: &EviSetup, z: f64) -> Result<Terms> {
    let grid = state.rho.grid();
    same_grid(grid, setup.potential.values.grid())?;
    let (delta, reg, pot) = (setup.delta, &setup.reg, &setup.potential);
    let area = grid.cell_area();
    let gr = cell_gradient(&state.rho);
    let gp = cell_gradient(&state.phi);
    let hp = hessian(&state.phi);
    let half_sq = ScalarField::new(grid.clone(), gp.iter().map(|g| 0.5 * (g[0] * g[0] + g[1] * g[1])).collect())?;
    let cross = ScalarField::new(
        grid.clone(),
        gp.iter().zip(&pot.grad).map(|(g, p)| g[0] * p[0] + g[1] * p[1]).collect(),
    )?;
    let g_half = cell_gradient(&half_sq);
    let g_cross = cell_gradient(&cross);
    let bochner = bochner_residual(&state.phi);
    let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
    let mut t = Terms::default();
    for k in 0..grid.len() {
        let [m, m1, m2] = reg.eval_raw(state.rho.values[k].max(0.0));
        let (r, p, v) = (gr[k], gp[k], pot.grad[k]);
        let p2 = dot(p, p);
        let hf = frobenius(hp[k]);
        t.j[0] += 0.5 * z * delta * m2 * dot(r, r) * p2;
        t.j[1] -= z * delta * m * hf * hf;
        t.j2_bracket += z * delta * m * (bochner.values[k] - hf * hf);
        t.j[2] += 0.5 * z * m * m2 * (dot(v, r) * p2 - 2.0 * dot(p, r) * dot(v, p));
        t.j3_bound += z * m * m2.abs() * dot(v, v).sqrt() * p2 * dot(r, r).sqrt();
        t.j[3] += z * m * m1 * (dot(v, g_half[k]) - dot(p, g_cross[k]));
        t.j4_bound += z * pot.hess_inf * m * m1.abs() * p2;
    }
    for x in t.j[..4].iter_mut().chain([&mut t.j2_bracket, &mut t.j3_bound, &mut t.j4_bound]) {
        *x *= area;
    }
    let phi_jets = boundary_jets(&state.phi);
    let rho_jets = boundary_jets(&state.rho);
    for ((pj, rj), face) in phi_jets.iter().zip(&rho_jets).zip(grid.boundary_faces()) {
        let m = reg.m(rj.value.max(0.0));
        t.j[4] += face.weight * 0.5 * delta * z * m * pj.grad_sq_normal(face.normal);
        t.j5_bound += face.weight * 0.5 * delta * z * setup.constants.c_omega * m * pj.grad_sq();
    }
    Ok(t)
}

/// One evaluation of the differential inequality at `(z, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EviReport {
    pub z: f64,
    pub h: f64,
    pub a_h: f64,
    pub da_dh: Derivative,
    pub df_dz: Derivative,
    pub terms: Terms,
    pub lambda: f64,
    /// `A_h / 2 + F_z` from the extrapolated differences.
    pub lhs: f64,
    /// `-lambda z A`.
    pub rhs: f64,
    pub slack: f64,
    /// Finite-difference error estimates plus the `J2` quadrature error.
    pub tol_disc: f64,
    /// `lhs - (J1 + ... + J5)`.
    pub identity_gap: f64,
    /// `A - <d_z rho^h, phi^h>`.
    pub duality_gap: f64,
    pub elliptic_residual: f64,
    pub constants: BoundaryConstants,
}

impl EviReport {
    /// `max(0, -slack) / A`: how far the inequality misses, relative to the action.
    pub fn defect(&self) -> f64 {
        if self.a_h > 0.0 {
            (-self.slack).max(0.0) / self.a_h
        } else {
            (-self.slack).max(0.0)
        }
    }
}

/// Evaluates both sides of `A_h / 2 + F_z <= -lambda z A` and the five-term
/// decomposition at `(z, h)`.
pub fn evi_terms(curve: &CurveSpec, setup: &EviSetup, z: f64, h: f64) -> Result<EviReport> {
    if !(0.0..1.0).contains(&h) {
        return Err(Error::OutOfRange { name: "h", value: h, constraint: "0≤h<1" });
    }
    same_grid(curve.grid(), setup.potential.values.grid())?;
    let dh = if h > 0.0 { setup.dh_frac * h } else { H_START_STEP };
    let (_, z_hi) = curve.range();
    let params = setup.semigroup((h + dh) * (z + setup.dz).min(z_hi));
    let state_at = |hh: f64| build_flow_state(curve, &params, z, hh, setup.dz, setup.elliptic_tol);
    let center = state_at(h)?;
    let a_h = action_a(&center.rho, &center.phi, &setup.reg)?;
    let duality_gap = a_h - center.drho_dz.inner(&center.phi)?;
    let scale = a_h / h.max(H_START_STEP);
    let da_dh = derivative(
        &mut |hh| {
            let s = state_at(hh)?;
            action_a(&s.rho, &s.phi, &setup.reg)
        },
        h,
        dh,
        1e-6 * scale,
        "dA/dh",
    )?;
    let f_scale = a_h.sqrt();
    let df_dz = derivative(
        &mut |zz| setup.functional(&semigroup_step(&curve.at(zz)?, &params, h * zz)?),
        z,
        setup.dz,
        1e-6 * f_scale,
        "dF/dz",
    )?;
    let terms = j_terms(&center, setup, z)?;
    let lhs = 0.5 * da_dh.extrapolated + df_dz.extrapolated;
    let rhs = -setup.lambda * z * a_h;
    let j_sum: f64 = terms.j.iter().sum();
    let tol_disc = 0.5 * da_dh.error + df_dz.error + (terms.j2_bracket - terms.j[1]).abs();
    Ok(EviReport {
        z,
        h,
        a_h,
        da_dh,
        df_dz,
        terms,
        lambda: setup.lambda,
        lhs,
        rhs,
        slack: rhs - lhs,
        tol_disc,
        identity_gap: lhs - j_sum,
        duality_gap,
        elliptic_residual: center.residual,
        constants: setup.constants.clone(),
    })
}

/// One `h` of the step-level inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub h: f64,
    /// `W(S_h u, v)^2`.
    pub w2_h: f64,
    /// `(W(S_h u, v)^2 - W(u, v)^2) / (2 h)`.
    pub quotient: f64,
    pub lhs: f64,
    pub slack: f64,
    /// Solver contribution to the tolerance at this `h`.
    pub solver_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub w2: f64,
    pub f_u: f64,
    pub f_v: f64,
    pub lambda: f64,
    /// `F(v) - F(u)`.
    pub rhs: f64,
    pub rows: Vec<StepRow>,
    /// Change of the quotient between the two smallest `h`.
    pub fd_tol: f64,
    /// Combined tolerance at the smallest `h`.
    pub tolerance: f64,
    /// Whether the inequality holds within `tolerance` at the smallest `h`.
    pub holds: bool,
}

fn squared_distance(
    a: &ScalarField,
    b: &ScalarField,
    reg: &RegularizedMobility,
    opts: &TransportSolveOptions,
) -> Result<(f64, f64)> {
    let (_, path, diag) = wm_distance(a, b, reg, opts)?;
    if !diag.converged {
        return Err(Error::NotConverged {
            solver: "transport",
            iterations: diag.iterations,
            residual: diag.continuity_residual,
        });
    }
    Ok((path.action, (path.action - path.nodal_action(reg)).abs()))
}

/// Checks `(W(S_h u, v)^2 - W(u, v)^2) / (2h) + (lambda / 2) W(u, v)^2 <= F(v) - F(u)`
/// along a decreasing sequence of `h`.
pub fn evi_step_check(
    u: &ScalarField,
    v: &ScalarField,
    setup: &EviSetup,
    h_seq: &[f64],
    opts: &TransportSolveOptions,
) -> Result<StepReport> {
    if h_seq.is_empty() || h_seq.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::Invalid("h sequence must be nonempty and positive".into()));
    }
    let params = setup.semigroup(h_seq.iter().cloned().fold(0.0, f64::max));
    let (w2, e0) = squared_distance(u, v, &setup.reg, opts)?;
    let f_u = setup.functional(u)?;
    let f_v = setup.functional(v)?;
    let rhs = f_v - f_u;
    let mut rows = Vec::with_capacity(h_seq.len());
    for &h in h_seq {
        let flowed = semigroup_step(u, &params, h)?;
        let (w2_h, e_h) = squared_distance(&flowed, v, &setup.reg, opts)?;
        let quotient = (w2_h - w2) / (2.0 * h);
        let lhs = quotient + 0.5 * setup.lambda * w2;
        rows.push(StepRow { h, w2_h, quotient, lhs, slack: rhs - lhs, solver_tol: (e0 + e_h) / (2.0 * h) });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].h.total_cmp(&rows[b].h));
    let last = &rows[order[0]];
    let fd_tol = if order.len() > 1 { (last.quotient - rows[order[1]].quotient).abs() } else { 0.0 };
    let tolerance = fd_tol + last.solver_tol;
    let holds = last.slack >= -tolerance;
    Ok(StepReport { w2, f_u, f_v, lambda: setup.lambda, rhs, rows, fd_tol, tolerance, holds })
}

/// One `h` of the flow-interchange audit.
#[derive(Debug, Clone, PartialEq)]
pub struct InterchangeRow {
    pub h: f64,
    /// `-(E(S_h u_min) - E(u_min)) / h`.
    pub lhs: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterchangeReport {
    /// `W(u_min, u_prev)^2`.
    pub w2: f64,
    /// `-(lambda / 2) W^2 + F(u_prev) - F(u_min)`.
    pub rhs: f64,
    pub rows: Vec<InterchangeRow>,
    pub tolerance: f64,
    pub holds: bool,
}

/// Audits a minimizing-movement step: the dissipation of `energy` along the
/// auxiliary semigroup at the minimizer against the `F` decrease of the step.
pub fn flow_interchange_check(
    u_prev: &ScalarField,
    u_min: &ScalarField,
    energy: &dyn Fn(&ScalarField) -> Result<f64>,
    setup: &EviSetup,
    h_seq: &[f64],
    opts: &TransportSolveOptions,
) -> Result<InterchangeReport> {
    if h_seq.is_empty() || h_seq.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::Invalid("h sequence must be nonempty and positive".into()));
    }
    let params = setup.semigroup(h_seq.iter().cloned().fold(0.0, f64::max));
    let (w2, e_w) = squared_distance(u_min, u_prev, &setup.reg, opts)?;
    let rhs = -0.5 * setup.lambda * w2 + setup.functional(u_prev)? - setup.functional(u_min)?;
    let e0 = energy(u_min)?;
    let mut rows = Vec::with_capacity(h_seq.len());
    for &h in h_seq {
        let e_h = energy(&semigroup_step(u_min, &params, h)?)?;
        let lhs = -(e_h - e0) / h;
        rows.push(InterchangeRow { h, lhs, slack: rhs - lhs });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].h.total_cmp(&rows[b].h));
    let last = &rows[order[0]];
    let fd_tol = if order.len() > 1 { (last.lhs - rows[order[1]].lhs).abs() } else { 0.0 };
    let tolerance = fd_tol + 0.5 * setup.lambda.abs() * e_w;
    let holds = last.slack >= -tolerance;
    Ok(InterchangeReport { w2, rhs, rows, tolerance, holds })
}
