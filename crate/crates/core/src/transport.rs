//! Dynamic weighted transport: minimizes `int int |nu|^2 / m(rho)` over
//! space-time paths obeying the discrete continuity equation with no flux.
//!
//! Unknowns live on a staggered space-time grid: densities at `n_time + 1`
//! time nodes, momenta on interior faces for each of the `n_time` intervals.
//! Each face-interval also carries a density copy `r`, tied to the space-time
//! average of the neighboring nodal densities by a linear constraint, so the
//! nonsmooth action separates into independent two-variable problems. The
//! saddle-point problem is solved by diagonally preconditioned
//! Chambolle-Pock iterations.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{same_grid, ScalarField};
use crate::grid::DomainGrid;
use crate::mobility::RegularizedMobility;

/// `|nu|^2 / m(rho)` with its lower semicontinuous convex extension.
pub fn action_density(rho: f64, nu: [f64; 2], reg: &RegularizedMobility) -> f64 {
    let n2 = nu[0] * nu[0] + nu[1] * nu[1];
    if n2 == 0.0 {
        return 0.0;
    }
    if rho < 0.0 || rho > reg.saturation() {
        return f64::INFINITY;
    }
    let m = reg.m(rho);
    if m <= 0.0 {
        f64::INFINITY
    } else {
        n2 / m
    }
}

const PROX_MAX_ITERS: usize = 200;

/// Minimizes `a nu^2 / m(r) + (r - rt)^2 / (2 tr) + (nu - nt)^2 / (2 tn)`
/// over `r` in `[0, M]`; returns `(r, nu)`. The momentum is eliminated in
/// closed form, leaving a convex scalar problem in `r`.
pub fn prox_pair(
    rt: f64,
    nt: f64,
    a: f64,
    tr: f64,
    tn: f64,
    reg: &RegularizedMobility,
    guess: f64,
) -> Result<(f64, f64)> {
    let top = reg.saturation();
    if nt == 0.0 || a == 0.0 {
        return Ok((rt.clamp(0.0, top), nt));
    }
    let beta = 2.0 * a * tn;
    let c = a * nt * nt;
    let dphi = |r: f64| -> (f64, f64) {
        let [m, m1, m2] = reg.eval_raw(r);
        let s = m + beta;
        let d1 = -c * m1 / (s * s) + (r - rt) / tr;
        let d2 = -c * (m2 * s - 2.0 * m1 * m1) / (s * s * s) + 1.0 / tr;
        (d1, d2)
    };
    let finish = |r: f64| {
        let m = reg.eval_raw(r)[0];
        (r, nt * m / (m + beta))
    };
    let d0 = dphi(0.0).0;
    if d0 >= 0.0 {
        return Ok(finish(0.0));
    }
    let mut lo = 0.0;
    let mut hi;
    if top.is_finite() {
        if dphi(top).0 <= 0.0 {
            return Ok(finish(top));
        }
        hi = top;
    } else {
        hi = rt.max(0.0).max(1e-3);
        let mut tries = 0;
        while dphi(hi).0 <= 0.0 {
            lo = hi;
            hi *= 2.0;
            tries += 1;
            if tries > 200 {
                return Err(Error::NotConverged { solver: "prox bracket", iterations: tries, residual: hi });
            }
        }
    }
    let mut x = if guess > lo && guess < hi { guess } else { 0.5 * (lo + hi) };
    for _ in 0..PROX_MAX_ITERS {
        let (d1, d2) = dphi(x);
        if d1.abs() * tr <= 1e-14 * (1.0 + rt.abs() + x) {
            return Ok(finish(x));
        }
        if d1 > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        if hi - lo <= 1e-15 * (1.0 + x) {
            return Ok(finish(x));
        }
        let newton = x - d1 / d2;
        x = if d2 > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Err(Error::NotConverged {
        solver: "prox_action",
        iterations: PROX_MAX_ITERS,
        residual: dphi(x).0.abs(),
    })
}

/// Proximal map of `gamma * action_density` at `(rho_t, nu_t)`.
pub fn prox_action(rho_t: f64, nu_t: [f64; 2], gamma: f64, reg: &RegularizedMobility) -> Result<(f64, [f64; 2])> {
    if !(gamma > 0.0) {
        return Err(Error::OutOfRange { name: "gamma", value: gamma, constraint: "γ>0" });
    }
    let norm = nu_t[0].hypot(nu_t[1]);
    let (r, n) = prox_pair(rho_t, norm, gamma, 1.0, 1.0, reg, rho_t)?;
    let scale = if norm > 0.0 { n / norm } else { 0.0 };
    Ok((r, [nu_t[0] * scale, nu_t[1] * scale]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportSolveOptions {
    pub n_time: usize,
    pub max_iters: usize,
    /// Multiplies primal steps and divides dual steps; the preconditioned
    /// product condition is unaffected.
    pub balance: f64,
    /// Continuity (and consistency) residual target, relative to mass.
    pub tol_residual: f64,
    /// Relative action change allowed over one check window.
    pub tol_action: f64,
    pub check_every: usize,
}

impl Default for TransportSolveOptions {
    fn default() -> Self {
        TransportSolveOptions {
            n_time: 16,
            max_iters: 40_000,
            balance: 1.0,
            tol_residual: 1e-6,
            tol_action: 1e-7,
            check_every: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransportPath {
    pub grid: Arc<DomainGrid>,
    pub n_time: usize,
    /// Densities at the `n_time + 1` time nodes.
    pub rho: Vec<ScalarField>,
    /// Momenta per interval on x-faces and y-faces.
    pub nu_x: Vec<Vec<f64>>,
    pub nu_y: Vec<Vec<f64>>,
    pub action: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// `sum |rho_{k+1} - rho_k + dt div nu_k| h^2` over intervals.
    pub continuity_residual: f64,
    /// `sum |r - I rho| h^2 dt`, the face-copy consistency error.
    pub consistency_residual: f64,
    /// Power-iteration estimate of the preconditioned operator norm.
    pub operator_norm: f64,
    /// Number of check windows in which the action increased.
    pub action_increases: usize,
}

impl TransportPath {
    /// Action of this path recomputed from its nodal densities.
    pub fn nodal_action(&self, reg: &RegularizedMobility) -> f64 {
        let g = &self.grid;
        let dt = 1.0 / self.n_time as f64;
        let mut total = 0.0;
        for k in 0..self.n_time {
            let (a, b) = (&self.rho[k].values, &self.rho[k + 1].values);
            for (faces, nu) in [(g.x_faces(), &self.nu_x[k]), (g.y_faces(), &self.nu_y[k])] {
                for (&[i, j], &v) in faces.iter().zip(nu.iter()) {
                    let r = 0.25 * (a[i] + a[j] + b[i] + b[j]);
                    total += action_density(r, [v, 0.0], reg);
                }
            }
        }
        total * dt * g.cell_area()
    }

    /// `sum |rho_{k+1} - rho_k + dt div nu_k| h^2`.
    pub fn continuity_residual(&self) -> f64 {
        let g = &self.grid;
        let dt = 1.0 / self.n_time as f64;
        let mut div = vec![0.0; g.len()];
        let mut total = 0.0;
        for k in 0..self.n_time {
            crate::calculus::div_into(g, &self.nu_x[k], &self.nu_y[k], &mut div);
            for i in 0..g.len() {
                total += (self.rho[k + 1].values[i] - self.rho[k].values[i] + dt * div[i]).abs();
            }
        }
        total * g.cell_area()
    }
}

/// Pointwise energy density acting on the terminal slice of a free-endpoint solve.
pub trait TerminalEnergy: Sync {
    /// First and second derivative of the density of cell `i` at `r`.
    fn derivs(&self, i: usize, r: f64) -> Result<(f64, f64)>;
    /// Coefficient of `(1/2) int |grad u|^2`, if present.
    fn gradient_weight(&self) -> f64 {
        0.0
    }
}

struct Layout {
    n: usize,
    k: usize,
    fx: usize,
    fy: usize,
    kappa: f64,
    s: f64,
}

enum Terminal<'a> {
    Fixed(Vec<f64>),
    Free { energy: &'a dyn TerminalEnergy, coef: f64, grad_coef: f64 },
}

struct Solver<'a> {
    grid: &'a DomainGrid,
    reg: RegularizedMobility,
    lay: Layout,
    start: Vec<f64>,
    terminal: Terminal<'a>,
    // Preconditioners.
    tau_rho: Vec<f64>,
    tau_r: f64,
    tau_nu: f64,
    sig_c: Vec<f64>,
    sig_e: f64,
    sig_g: f64,
}

#[derive(Clone)]
struct Primal {
    rho: Vec<f64>,
    rx: Vec<f64>,
    ry: Vec<f64>,
    vx: Vec<f64>,
    vy: Vec<f64>,
}

#[derive(Clone)]
struct Dual {
    c: Vec<f64>,
    ex: Vec<f64>,
    ey: Vec<f64>,
    g: Vec<f64>,
}

impl Primal {
    fn zeros(l: &Layout) -> Self {
        Primal {
            rho: vec![0.0; (l.k + 1) * l.n],
            rx: vec![0.0; l.k * l.fx],
            ry: vec![0.0; l.k * l.fy],
            vx: vec![0.0; l.k * l.fx],
            vy: vec![0.0; l.k * l.fy],
        }
    }

    fn parts(&self) -> [&Vec<f64>; 5] {
        [&self.rho, &self.rx, &self.ry, &self.vx, &self.vy]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.rho, &mut self.rx, &mut self.ry, &mut self.vx, &mut self.vy]
    }
}

impl Dual {
    fn zeros(l: &Layout, with_grad: bool) -> Self {
        Dual {
            c: vec![0.0; l.k * l.n],
            ex: vec![0.0; l.k * l.fx],
            ey: vec![0.0; l.k * l.fy],
            g: if with_grad { vec![0.0; l.fx + l.fy] } else { Vec::new() },
        }
    }

    fn parts(&self) -> [&Vec<f64>; 4] {
        [&self.c, &self.ex, &self.ey, &self.g]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.c, &mut self.ex, &mut self.ey, &mut self.g]
    }
}

impl<'a> Solver<'a> {
    fn new(
        grid: &'a DomainGrid,
        reg: RegularizedMobility,
        n_time: usize,
        start: Vec<f64>,
        terminal: Terminal<'a>,
        balance: f64,
    ) -> Self {
        let n = grid.len();
        let k = n_time;
        let dt = 1.0 / k as f64;
        let s = grid.h() / (2.0 * dt);
        let kappa = dt * s / grid.h();
        let lay = Layout { n, k, fx: grid.x_faces().len(), fy: grid.y_faces().len(), kappa, s };
        let mut nf = vec![0.0; n];
        for &[a, b] in grid.x_faces().iter().chain(grid.y_faces()) {
            nf[a] += 1.0;
            nf[b] += 1.0;
        }
        let has_grad = matches!(terminal, Terminal::Free { grad_coef, .. } if grad_coef > 0.0);
        let mut tau_rho = vec![0.0; (k + 1) * n];
        for t in 0..=k {
            let adj = if t == 0 || t == k { 1.0 } else { 2.0 };
            for i in 0..n {
                let mut col = adj * (1.0 + 0.25 * nf[i]);
                if t == k && has_grad {
                    col += nf[i];
                }
                tau_rho[t * n + i] = balance / col;
            }
        }
        let sig_c: Vec<f64> = (0..k * n).map(|j| 1.0 / (balance * (2.0 + kappa * nf[j % n]))).collect();
        Solver {
            grid,
            reg,
            lay,
            start,
            terminal,
            tau_rho,
            tau_r: balance,
            tau_nu: balance / (2.0 * kappa),
            sig_c,
            sig_e: 1.0 / (2.0 * balance),
            sig_g: 1.0 / (2.0 * balance),
        }
    }

    fn grad_coef(&self) -> f64 {
        match self.terminal {
            Terminal::Free { grad_coef, .. } => grad_coef,
            Terminal::Fixed(_) => 0.0,
        }
    }

    /// Rows: continuity, x/y consistency, terminal gradient.
    fn apply_k(&self, x: &Primal, y: &mut Dual) {
        let l = &self.lay;
        let g = self.grid;
        for t in 0..l.k {
            let c = &mut y.c[t * l.n..(t + 1) * l.n];
            let r0 = &x.rho[t * l.n..(t + 1) * l.n];
            let r1 = &x.rho[(t + 1) * l.n..(t + 2) * l.n];
            for i in 0..l.n {
                c[i] = r1[i] - r0[i];
            }
            for (f, &[a, b]) in g.x_faces().iter().enumerate() {
                let v = l.kappa * x.vx[t * l.fx + f];
                c[a] += v;
                c[b] -= v;
                y.ex[t * l.fx + f] = x.rx[t * l.fx + f] - 0.25 * (r0[a] + r0[b] + r1[a] + r1[b]);
            }
            for (f, &[a, b]) in g.y_faces().iter().enumerate() {
                let v = l.kappa * x.vy[t * l.fy + f];
                c[a] += v;
                c[b] -= v;
                y.ey[t * l.fy + f] = x.ry[t * l.fy + f] - 0.25 * (r0[a] + r0[b] + r1[a] + r1[b]);
            }
        }
        if !y.g.is_empty() {
            let rk = &x.rho[l.k * l.n..];
            for (f, &[a, b]) in g.x_faces().iter().chain(g.y_faces()).enumerate() {
                y.g[f] = rk[b] - rk[a];
            }
        }
    }

    fn apply_kt(&self, y: &Dual, x: &mut Primal) {
        let l = &self.lay;
        let g = self.grid;
        x.rho.fill(0.0);
        for t in 0..l.k {
            let c = &y.c[t * l.n..(t + 1) * l.n];
            for i in 0..l.n {
                x.rho[t * l.n + i] -= c[i];
                x.rho[(t + 1) * l.n + i] += c[i];
            }
            for (f, &[a, b]) in g.x_faces().iter().enumerate() {
                let e = 0.25 * y.ex[t * l.fx + f];
                for node in [t, t + 1] {
                    x.rho[node * l.n + a] -= e;
                    x.rho[node * l.n + b] -= e;
                }
                x.rx[t * l.fx + f] = y.ex[t * l.fx + f];
                x.vx[t * l.fx + f] = l.kappa * (c[a] - c[b]);
            }
            for (f, &[a, b]) in g.y_faces().iter().enumerate() {
                let e = 0.25 * y.ey[t * l.fy + f];
                for node in [t, t + 1] {
                    x.rho[node * l.n + a] -= e;
                    x.rho[node * l.n + b] -= e;
                }
                x.ry[t * l.fy + f] = y.ey[t * l.fy + f];
                x.vy[t * l.fy + f] = l.kappa * (c[a] - c[b]);
            }
        }
        if !y.g.is_empty() {
            let off = l.k * l.n;
            for (f, &[a, b]) in g.x_faces().iter().chain(g.y_faces()).enumerate() {
                x.rho[off + a] -= y.g[f];
                x.rho[off + b] += y.g[f];
            }
        }
    }

    /// Objective weight `a` of `a nu_hat^2 / m(r)` in the scaled problem.
    fn pair_weight(&self) -> f64 {
        self.lay.s * self.lay.s
    }

    fn prox(&self, x: &mut Primal, prev: &Primal) -> Result<()> {
        let l = &self.lay;
        let top = self.reg.saturation();
        let n = l.n;
        // Nodal densities.
        x.rho[..n].copy_from_slice(&self.start);
        for v in &mut x.rho[n..l.k * n] {
            *v = v.clamp(0.0, top);
        }
        match &self.terminal {
            Terminal::Fixed(end) => x.rho[l.k * n..].copy_from_slice(end),
            Terminal::Free { energy, coef, .. } => {
                let taus = &self.tau_rho[l.k * n..];
                let guess = &prev.rho[l.k * n..];
                x.rho[l.k * n..]
                    .par_iter_mut()
                    .enumerate()
                    .try_for_each(|(i, v)| -> Result<()> {
                        *v = prox_energy(*v, taus[i] * coef, |r| energy.derivs(i, r), top, guess[i])?;
                        Ok(())
                    })?;
            }
        }
        let a = self.pair_weight();
        let (tr, tn) = (self.tau_r, self.tau_nu);
        let reg = self.reg;
        for (rs, vs, prs) in [(&mut x.rx, &mut x.vx, &prev.rx), (&mut x.ry, &mut x.vy, &prev.ry)] {
            rs.par_iter_mut()
                .zip(vs.par_iter_mut())
                .zip(prs.par_iter())
                .try_for_each(|((r, v), &pr)| -> Result<()> {
                    let (nr, nv) = prox_pair(*r, *v, a, tr, tn, &reg, pr)?;
                    *r = nr;
                    *v = nv;
                    Ok(())
                })?;
        }
        Ok(())
    }

    /// Scaled objective `sum a nu_hat^2 / m(r)` converted to the physical action.
    fn action(&self, x: &Primal) -> f64 {
        let a = self.pair_weight();
        let reg = self.reg;
        let sum = |r: &[f64], v: &[f64]| -> f64 {
            r.par_iter()
                .zip(v.par_iter())
                .map(|(&r, &v)| a * action_density(r, [v, 0.0], &reg))
                .collect::<Vec<f64>>()
                .iter()
                .sum()
        };
        let dt = 1.0 / self.lay.k as f64;
        (sum(&x.rx, &x.vx) + sum(&x.ry, &x.vy)) * dt * self.grid.cell_area()
    }

    fn residuals(&self, x: &Primal, scratch: &mut Dual) -> (f64, f64) {
        self.apply_k(x, scratch);
        let h2 = self.grid.cell_area();
        let dt = 1.0 / self.lay.k as f64;
        let cont = scratch.c.iter().map(|v| v.abs()).sum::<f64>() * h2;
        let cons = scratch.ex.iter().chain(&scratch.ey).map(|v| v.abs()).sum::<f64>() * h2 * dt;
        (cont, cons)
    }

    /// Power iteration on the preconditioned operator `S^(1/2) K T^(1/2)`.
    fn operator_norm(&self, iters: usize) -> f64 {
        let l = &self.lay;
        let mut x = Primal::zeros(l);
        let mut y = Dual::zeros(l, self.grad_coef() > 0.0);
        let mut seed = 0x9e3779b97f4a7c15_u64;
        let mut next = || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for v in x.rho.iter_mut().chain(&mut x.rx).chain(&mut x.ry).chain(&mut x.vx).chain(&mut x.vy) {
            *v = next();
        }
        let tsqrt = |x: &mut Primal, s: &Self| {
            for (v, t) in x.rho.iter_mut().zip(&s.tau_rho) {
                *v *= t.sqrt();
            }
            x.rx.iter_mut().chain(&mut x.ry).for_each(|v| *v *= s.tau_r.sqrt());
            x.vx.iter_mut().chain(&mut x.vy).for_each(|v| *v *= s.tau_nu.sqrt());
        };
        let ssqrt = |y: &mut Dual, s: &Self| {
            for (v, t) in y.c.iter_mut().zip(&s.sig_c) {
                *v *= t.sqrt();
            }
            y.ex.iter_mut().chain(&mut y.ey).for_each(|v| *v *= s.sig_e.sqrt());
            y.g.iter_mut().for_each(|v| *v *= s.sig_g.sqrt());
        };
        let norm = |x: &Primal| x.parts().iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let mut est = 0.0;
        for _ in 0..iters {
            let nx = norm(&x);
            if nx == 0.0 {
                return 0.0;
            }
            for p in [&mut x.rho, &mut x.rx, &mut x.ry, &mut x.vx, &mut x.vy] {
                p.iter_mut().for_each(|v| *v /= nx);
            }
            let mut xs = x.clone();
            tsqrt(&mut xs, self);
            self.apply_k(&xs, &mut y);
            ssqrt(&mut y, self);
            ssqrt(&mut y, self);
            self.apply_kt(&y, &mut x);
            tsqrt(&mut x, self);
            est = norm(&x).sqrt();
        }
        est
    }

    fn run(&self, init: Primal, opts: &TransportSolveOptions) -> Result<(Primal, TransportDiagnostics)> {
        let l = &self.lay;
        let with_grad = self.grad_coef() > 0.0;
        let gc = self.grad_coef();
        let op_norm = self.operator_norm(30);
        let tau = self.tau_full();
        let sig = self.sig_full(with_grad);
        let mut x = init;
        let start = x.clone();
        self.prox(&mut x, &start)?;
        let mut y = Dual::zeros(l, with_grad);
        let mut kx = Dual::zeros(l, with_grad);
        self.apply_k(&x, &mut kx);
        let mut kx_new = kx.clone();
        let mut kty = Primal::zeros(l);
        let mut kty_new = Primal::zeros(l);
        let mut prev_x = x.clone();
        let mut prev_y = y.clone();
        let mass = self.start.iter().sum::<f64>() * self.grid.cell_area();
        let mut last_action = self.action(&x);
        let mut increases = 0;
        let mut iters = 0;
        let mut converged = false;
        while iters < opts.max_iters {
            prev_x.clone_from(&x);
            for ((v, k), t) in x.parts_mut().into_iter().zip(kty.parts()).zip(tau.parts()) {
                for ((v, k), t) in v.iter_mut().zip(k).zip(t) {
                    *v -= t * k;
                }
            }
            self.prox(&mut x, &prev_x)?;
            self.apply_k(&x, &mut kx_new);
            prev_y.clone_from(&y);
            for ((yv, (kn, ko)), s) in y.parts_mut().into_iter().zip(kx_new.parts().into_iter().zip(kx.parts())).zip(sig.parts()) {
                for (((yv, kn), ko), s) in yv.iter_mut().zip(kn).zip(ko).zip(s) {
                    *yv += s * (2.0 * kn - ko);
                }
            }
            if with_grad {
                // F(q) = gc sum q^2, so prox of sigma F* divides by 1 + sigma / (2 gc).
                for (yv, s) in y.g.iter_mut().zip(&sig.g) {
                    *yv /= 1.0 + s / (2.0 * gc);
                }
            }
            self.apply_kt(&y, &mut kty_new);
            iters += 1;

            std::mem::swap(&mut kx, &mut kx_new);
            std::mem::swap(&mut kty, &mut kty_new);

            if iters % opts.check_every == 0 {
                let action = self.action(&x);
                if action > last_action {
                    increases += 1;
                }
                let (cont, cons) = self.residuals(&x, &mut kx_new);
                let stalled = (action - last_action).abs() <= opts.tol_action * action.max(1e-14);
                last_action = action;
                if cont <= opts.tol_residual * mass && cons <= opts.tol_residual * mass && stalled {
                    converged = true;
                    break;
                }
            }
        }
        let (cont, cons) = self.residuals(&x, &mut kx_new);
        Ok((
            x,
            TransportDiagnostics {
                iterations: iters,
                converged,
                continuity_residual: cont,
                consistency_residual: cons,
                operator_norm: op_norm,
                action_increases: increases,
            },
        ))
    }

    fn tau_full(&self) -> Primal {
        let l = &self.lay;
        Primal {
            rho: self.tau_rho.clone(),
            rx: vec![self.tau_r; l.k * l.fx],
            ry: vec![self.tau_r; l.k * l.fy],
            vx: vec![self.tau_nu; l.k * l.fx],
            vy: vec![self.tau_nu; l.k * l.fy],
        }
    }

    fn sig_full(&self, with_grad: bool) -> Dual {
        let l = &self.lay;
        Dual {
            c: self.sig_c.clone(),
            ex: vec![self.sig_e; l.k * l.fx],
            ey: vec![self.sig_e; l.k * l.fy],
            g: if with_grad { vec![self.sig_g; l.fx + l.fy] } else { Vec::new() },
        }
    }
    fn initial(&self, end: &[f64]) -> Primal {
        let l = &self.lay;
        let mut x = Primal::zeros(l);
        for t in 0..=l.k {
            let w = t as f64 / l.k as f64;
            for i in 0..l.n {
                x.rho[t * l.n + i] = (1.0 - w) * self.start[i] + w * end[i];
            }
        }
        for t in 0..l.k {
            let r0 = &x.rho[t * l.n..(t + 1) * l.n];
            let r1 = &x.rho[(t + 1) * l.n..(t + 2) * l.n];
            for (f, &[a, b]) in self.grid.x_faces().iter().enumerate() {
                x.rx[t * l.fx + f] = 0.25 * (r0[a] + r0[b] + r1[a] + r1[b]);
            }
            for (f, &[a, b]) in self.grid.y_faces().iter().enumerate() {
                x.ry[t * l.fy + f] = 0.25 * (r0[a] + r0[b] + r1[a] + r1[b]);
            }
        }
        x
    }

    fn path(&self, x: &Primal) -> Result<TransportPath> {
        let l = &self.lay;
        let grid = Arc::new(self.grid.clone());
        let rho = (0..=l.k)
            .map(|t| ScalarField::new(grid.clone(), x.rho[t * l.n..(t + 1) * l.n].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let nu_x = (0..l.k).map(|t| x.vx[t * l.fx..(t + 1) * l.fx].iter().map(|v| v * l.s).collect()).collect();
        let nu_y = (0..l.k).map(|t| x.vy[t * l.fy..(t + 1) * l.fy].iter().map(|v| v * l.s).collect()).collect();
        Ok(TransportPath { grid, n_time: l.k, rho, nu_x, nu_y, action: self.action(x) })
    }
}

/// Minimizes `c e(r) + (r - rt)^2 / (2 t)` over `[0, top]` for a convex (or
/// mildly nonconvex, `c e'' > -1/t`) density `e`, by safeguarded Newton.
fn prox_energy(
    rt: f64,
    tc: f64,
    derivs: impl Fn(f64) -> Result<(f64, f64)>,
    top: f64,
    guess: f64,
) -> Result<f64> {
    // tc = t * c; optimality: tc e'(r) + r - rt = 0.
    let psi = |r: f64| -> Result<(f64, f64)> {
        let (d1, d2) = derivs(r)?;
        Ok((tc * d1 + r - rt, tc * d2 + 1.0))
    };
    let (p0, _) = psi(0.0)?;
    if p0 >= 0.0 {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi;
    if top.is_finite() {
        if psi(top)?.0 <= 0.0 {
            return Ok(top);
        }
        hi = top;
    } else {
        hi = rt.max(1e-3);
        let mut n = 0;
        while psi(hi)?.0 <= 0.0 {
            lo = hi;
            hi *= 2.0;
            n += 1;
            if n > 200 {
                return Err(Error::NotConverged { solver: "energy prox bracket", iterations: n, residual: hi });
            }
        }
    }
    let mut x = if guess > lo && guess < hi { guess } else { 0.5 * (lo + hi) };
    for _ in 0..PROX_MAX_ITERS {
        let (p, dp) = psi(x)?;
        if p.abs() <= 1e-14 * (1.0 + rt.abs() + x) {
            return Ok(x);
        }
        if p > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        if hi - lo <= 1e-15 * (1.0 + x) {
            return Ok(x);
        }
        let newton = x - p / dp;
        x = if dp > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Err(Error::NotConverged { solver: "energy prox", iterations: PROX_MAX_ITERS, residual: psi(x)?.0.abs() })
}

fn check_inputs(mu0: &ScalarField, mu1: &ScalarField, reg: &RegularizedMobility) -> Result<()> {
    same_grid(mu0.grid(), mu1.grid())?;
    for mu in [mu0, mu1] {
        if mu.min() < 0.0 {
            return Err(Error::NegativeDensity(mu.min()));
        }
        if mu.max() > reg.saturation() {
            return Err(Error::OutOfRange { name: "density", value: mu.max(), constraint: "ρ≤M" });
        }
    }
    let (m0, m1) = (mu0.mass(), mu1.mass());
    let gap = (m0 - m1).abs() / m0.abs().max(m1.abs()).max(1e-300);
    if gap > 1e-10 {
        return Err(Error::MassMismatch { mass0: m0, mass1: m1, gap });
    }
    Ok(())
}

/// Weighted Wasserstein distance between `mu0` and `mu1`.
///
/// Non-convergence within `max_iters` is not an error: the last iterate is
/// returned with `converged = false`.
pub fn wm_distance(
    mu0: &ScalarField,
    mu1: &ScalarField,
    reg: &RegularizedMobility,
    opts: &TransportSolveOptions,
) -> Result<(f64, TransportPath, TransportDiagnostics)> {
    check_inputs(mu0, mu1, reg)?;
    if opts.n_time == 0 {
        return Err(Error::OutOfRange { name: "n_time", value: 0.0, constraint: "n_time≥1" });
    }
    let grid = mu0.grid();
    let solver = Solver::new(grid, *reg, opts.n_time, mu0.values.clone(), Terminal::Fixed(mu1.values.clone()), opts.balance);
    let init = solver.initial(&mu1.values);
    let (x, diag) = solver.run(init, opts)?;
    let path = solver.path(&x)?;
    Ok((path.action.max(0.0).sqrt(), path, diag))
}

/// Result of a free-endpoint step.
#[derive(Debug, Clone)]
pub struct JkoInner {
    pub minimizer: ScalarField,
    /// Action of the computed path, an estimate of `W^2(mu_prev, minimizer)`.
    pub w2: f64,
    pub diagnostics: TransportDiagnostics,
}

/// Minimizes `W_m(v, mu_prev)^2 / (2 tau) + E(v)` with `E` given by a
/// pointwise density (plus an optional Dirichlet term). The terminal slice
/// of the transport path is a free variable; the returned minimizer is
/// rescaled to the exact input mass.
pub fn jko_inner_minimize(
    mu_prev: &ScalarField,
    energy: &dyn TerminalEnergy,
    tau: f64,
    reg: &RegularizedMobility,
    opts: &TransportSolveOptions,
    warm: Option<&ScalarField>,
) -> Result<JkoInner> {
    if !(tau > 0.0) {
        return Err(Error::OutOfRange { name: "tau", value: tau, constraint: "τ>0" });
    }
    check_inputs(mu_prev, mu_prev, reg)?;
    let grid = mu_prev.grid();
    let dt = 1.0 / opts.n_time as f64;
    // Scaled objective is action / (dt h^2); E = h^2 sum e contributes
    // (2 tau / dt) e per cell and (tau / (dt h^2)) per squared face jump.
    let coef = 2.0 * tau / dt;
    let grad_coef = energy.gradient_weight() * tau / (dt * grid.cell_area());
    let terminal = Terminal::Free { energy, coef, grad_coef };
    let solver = Solver::new(grid, *reg, opts.n_time, mu_prev.values.clone(), terminal, opts.balance);
    let end = warm.map(|w| w.values.clone()).unwrap_or_else(|| mu_prev.values.clone());
    let init = solver.initial(&end);
    let (x, diag) = solver.run(init, opts)?;
    let path = solver.path(&x)?;
    let mut out = path.rho[opts.n_time].clone();
    let target = mu_prev.mass();
    let got = out.mass();
    if !(got > 0.0) {
        return Err(Error::Invalid("free-endpoint solve lost all mass".into()));
    }
    out = out.scaled(target / got);
    Ok(JkoInner { minimizer: out, w2: path.action, diagnostics: diag })
}
