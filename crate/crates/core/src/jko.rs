//! Minimizing-movement driver with Keller-Segel and Cahn-Hilliard energies.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::{same_grid, ScalarField};
use crate::kernels::screened_heat_step;
use crate::mobility::{integrate, Mobility, RegularizedMobility};
use crate::transport::{jko_inner_minimize, TerminalEnergy, TransportSolveOptions};

/// Homogeneous free energy `G` of the Cahn-Hilliard functional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GSpec {
    /// `theta r^2 (1 - r)^2`.
    BinaryAlloy { theta: f64 },
    /// `theta (r log r + (1 - r) log(1 - r))`.
    Logarithmic { theta: f64 },
    /// `kappa beta / ((beta - alpha)(beta - alpha + 1)) r^(beta - alpha + 1)`.
    ThinFilm { kappa: f64, alpha: f64, beta: f64 },
}

const LOG_CLIP: f64 = 1e-12;

impl GSpec {
    fn check(&self, r: f64) -> Result<f64> {
        match self {
            GSpec::Logarithmic { .. } => {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::OutOfRange { name: "u", value: r, constraint: "0≤u≤1" });
                }
                Ok(r.clamp(LOG_CLIP, 1.0 - LOG_CLIP))
            }
            _ => {
                if r < 0.0 || !r.is_finite() {
                    return Err(Error::OutOfRange { name: "u", value: r, constraint: "u≥0" });
                }
                Ok(r)
            }
        }
    }

    pub fn g(&self, r: f64) -> Result<f64> {
        let r = self.check(r)?;
        Ok(match *self {
            GSpec::BinaryAlloy { theta } => theta * r * r * (1.0 - r) * (1.0 - r),
            GSpec::Logarithmic { theta } => theta * (r * r.ln() + (1.0 - r) * (1.0 - r).ln()),
            GSpec::ThinFilm { kappa, alpha, beta } => {
                let q = beta - alpha;
                kappa * beta / (q * (q + 1.0)) * r.powf(q + 1.0)
            }
        })
    }

    pub fn g1(&self, r: f64) -> Result<f64> {
        let r = self.check(r)?;
        Ok(match *self {
            GSpec::BinaryAlloy { theta } => theta * 2.0 * r * (1.0 - r) * (1.0 - 2.0 * r),
            GSpec::Logarithmic { theta } => theta * (r.ln() - (1.0 - r).ln()),
            GSpec::ThinFilm { kappa, alpha, beta } => {
                let q = beta - alpha;
                kappa * beta / q * r.powf(q)
            }
        })
    }

    pub fn g2(&self, r: f64) -> Result<f64> {
        let r = self.check(r)?;
        Ok(match *self {
            GSpec::BinaryAlloy { theta } => theta * (2.0 - 12.0 * r + 12.0 * r * r),
            GSpec::Logarithmic { theta } => theta / (r * (1.0 - r)),
            GSpec::ThinFilm { kappa, alpha, beta } => kappa * beta * r.powf(beta - alpha - 1.0),
        })
    }

    /// Largest concavity `max(-G'')` on `[0, top]`, at least 1.
    pub fn stabilization(&self, top: f64) -> f64 {
        let hi = if top.is_finite() { top } else { 10.0 };
        let worst = (0..=2000)
            .filter_map(|i| self.g2(hi * i as f64 / 2000.0).ok())
            .fold(0.0_f64, |m, v| m.max(-v));
        worst.max(1.0)
    }

    /// Pressure `P(r) = int_0^r m(s) G''(s) ds`.
    pub fn pressure(&self, mob: &RegularizedMobility, r: f64) -> Result<f64> {
        self.check(r)?;
        Ok(integrate(&|s| mob.m(s) * self.g2(s).unwrap_or(0.0), 0.0, r))
    }

    /// Numerical check of the compatibility condition between `G` and `m`:
    /// `m G''` bounded below, `P` continuous, and in the unbounded case
    /// `P(s) / (s^q + |G(s)|) -> 0` on a log-spaced grid.
    pub fn check_condition(&self, mob: &RegularizedMobility, q: f64) -> Result<()> {
        let top = mob.saturation();
        let pts: Vec<f64> = if top.is_finite() {
            (1..2000).map(|i| top * i as f64 / 2000.0).collect()
        } else {
            (0..400).map(|i| 1e-6 * 1e12_f64.powf(i as f64 / 399.0)).collect()
        };
        let mut lower = f64::INFINITY;
        for &r in &pts {
            let v = mob.m(r) * self.g2(r)?;
            lower = lower.min(v);
            if !v.is_finite() && v < 0.0 {
                return Err(Error::Invalid(format!("m G'' unbounded below at r={r}")));
            }
        }
        if !lower.is_finite() {
            return Err(Error::Invalid("m G'' is not bounded below".into()));
        }
        if !top.is_finite() {
            let ratio = |s: f64| -> Result<f64> { Ok(self.pressure(mob, s)?.abs() / (s.powf(q) + self.g(s)?.abs())) };
            let far = ratio(1e6)?;
            let farther = ratio(1e8)?;
            if !(farther <= far && farther < 1e-2) {
                return Err(Error::Invalid(format!(
                    "pressure growth condition fails: P/(s^q+|G|) = {farther:e} at s=1e8"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for GSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GSpec::BinaryAlloy { theta } => write!(f, "binary_alloy:theta={theta}"),
            GSpec::Logarithmic { theta } => write!(f, "logarithmic:theta={theta}"),
            GSpec::ThinFilm { kappa, alpha, beta } => write!(f, "thin_film:kappa={kappa},alpha={alpha},beta={beta}"),
        }
    }
}

impl FromStr for GSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, params) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = std::collections::BTreeMap::new();
        for part in params.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("expected key=value in G spec, got '{part}'")))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Invalid(format!("bad number '{v}'")))?;
            kv.insert(k.trim().to_string(), v);
        }
        let mut get = |k: &str| kv.remove(k).ok_or_else(|| Error::Invalid(format!("G spec needs '{k}'")));
        let spec = match name.trim() {
            "binary_alloy" => GSpec::BinaryAlloy { theta: get("theta")? },
            "logarithmic" => GSpec::Logarithmic { theta: get("theta")? },
            "thin_film" => GSpec::ThinFilm {
                kappa: get("kappa")?,
                alpha: get("alpha")?,
                beta: get("beta")?,
            },
            other => return Err(Error::Invalid(format!("unknown G '{other}'"))),
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::Invalid(format!("unknown G parameter '{k}'")));
        }
        Ok(spec)
    }
}

/// Free energy of one minimizing-movement step.
#[derive(Debug, Clone)]
pub enum Energy {
    Zero,
    /// `int Phi(u) - chi int u v` with `v` frozen and
    /// `Phi(u) = p u^(p+1-alpha) / ((p-alpha)(p+1-alpha))`.
    KsInternal { p: f64, alpha: f64, chi: f64, v: ScalarField },
    /// `(1/2) int |grad u|^2 + int G(u)`.
    CahnHilliard { g: GSpec },
}

/// Keller-Segel internal density and its first two derivatives.
pub fn ks_phi(p: f64, alpha: f64, r: f64) -> [f64; 3] {
    let q = p + 1.0 - alpha;
    if r <= 0.0 {
        let d2 = if p - alpha - 1.0 < 0.0 { f64::INFINITY } else if p - alpha - 1.0 == 0.0 { p } else { 0.0 };
        return [0.0, 0.0, d2];
    }
    [p * r.powf(q) / ((p - alpha) * q), p * r.powf(p - alpha) / (p - alpha), p * r.powf(p - alpha - 1.0)]
}

/// Discrete no-flux Laplacian over the grid's interior faces.
pub fn neumann_laplacian(u: &ScalarField) -> ScalarField {
    let grid = u.grid();
    let inv = 1.0 / (grid.h() * grid.h());
    let mut out = vec![0.0; grid.len()];
    for &[a, b] in grid.x_faces().iter().chain(grid.y_faces()) {
        let d = (u.values[b] - u.values[a]) * inv;
        out[a] += d;
        out[b] -= d;
    }
    ScalarField::new(grid.clone(), out).expect("same grid")
}

/// `(1/2) sum over faces of the squared jump`, the discrete Dirichlet energy.
pub fn dirichlet_energy(u: &ScalarField) -> f64 {
    let grid = u.grid();
    let mut total = 0.0;
    for &[a, b] in grid.x_faces().iter().chain(grid.y_faces()) {
        let d = u.values[b] - u.values[a];
        total += d * d;
    }
    0.5 * total
}

impl Energy {
    fn check(&self, u: &ScalarField) -> Result<()> {
        if let Energy::KsInternal { v, .. } = self {
            same_grid(u.grid(), v.grid())?;
        }
        Ok(())
    }

    /// Pointwise density `e(r)` at cell `i` and its first two derivatives.
    fn density(&self, i: usize, r: f64) -> Result<[f64; 3]> {
        match self {
            Energy::Zero => Ok([0.0; 3]),
            Energy::KsInternal { p, alpha, chi, v } => {
                if !(r >= 0.0) {
                    return Err(Error::NegativeDensity(r));
                }
                let [f, f1, f2] = ks_phi(*p, *alpha, r);
                let c = chi * v.values[i];
                Ok([f - c * r, f1 - c, f2])
            }
            Energy::CahnHilliard { g } => Ok([g.g(r)?, g.g1(r)?, g.g2(r)?]),
        }
    }

    pub fn eval(&self, u: &ScalarField) -> Result<f64> {
        self.check(u)?;
        let mut total = 0.0;
        for (i, &r) in u.values.iter().enumerate() {
            total += self.density(i, r)?[0];
        }
        total *= u.grid().cell_area();
        if let Energy::CahnHilliard { .. } = self {
            total += dirichlet_energy(u);
        }
        Ok(total)
    }

    /// `L^2` gradient: `Phi'(u) - chi v`, or `-lap u + G'(u)`.
    pub fn first_variation(&self, u: &ScalarField) -> Result<ScalarField> {
        self.check(u)?;
        let vals = u
            .values
            .iter()
            .enumerate()
            .map(|(i, &r)| Ok(self.density(i, r)?[1]))
            .collect::<Result<Vec<f64>>>()?;
        let mut out = ScalarField::new(u.grid().clone(), vals)?;
        if let Energy::CahnHilliard { .. } = self {
            out = out.axpby(1.0, &neumann_laplacian(u), -1.0)?;
        }
        Ok(out)
    }
}

impl TerminalEnergy for Energy {
    fn derivs(&self, i: usize, r: f64) -> Result<(f64, f64)> {
        let [_, d1, d2] = self.density(i, r)?;
        Ok((d1, d2))
    }

    fn gradient_weight(&self) -> f64 {
        match self {
            Energy::CahnHilliard { .. } => 1.0,
            _ => 0.0,
        }
    }
}

pub fn energy_eval(energy: &Energy, u: &ScalarField) -> Result<f64> {
    energy.eval(u)
}

pub fn energy_first_variation(energy: &Energy, u: &ScalarField) -> Result<ScalarField> {
    energy.first_variation(u)
}

/// One implicit step of `v_t = lap v - v + u`.
pub fn ks_v_step(v: &ScalarField, u: &ScalarField, tau: f64) -> Result<ScalarField> {
    screened_heat_step(v, u, tau)
}

/// Which energy a run minimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnergyKind {
    Zero,
    /// Keller-Segel with the chemical concentration updated between steps.
    KellerSegel { p: f64, chi: f64 },
    CahnHilliard { g: GSpec },
}

#[derive(Debug, Clone)]
pub struct JkoRunConfig {
    pub tau: f64,
    pub n_steps: usize,
    pub reg: RegularizedMobility,
    pub energy: EnergyKind,
    pub transport: TransportSolveOptions,
    /// Keep every `output_every`-th iterate (the last one always).
    pub output_every: usize,
}

/// Mass tolerance for admissible initial data and per-step conservation.
pub const MASS_TOL: f64 = 1e-8;

impl JkoRunConfig {
    /// Keller-Segel exponent `alpha` from the power mobility.
    fn ks_alpha(&self) -> Result<f64> {
        match self.reg.base {
            Mobility::Power { alpha } => Ok(alpha),
            _ => Err(Error::Invalid("Keller-Segel runs need a power mobility".into())),
        }
    }

    /// Validates the configuration; returns warnings that do not stop a run.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::OutOfRange { name: "tau", value: self.tau, constraint: "τ>0" });
        }
        if self.output_every == 0 {
            return Err(Error::Invalid("output cadence must be at least 1".into()));
        }
        let mut warnings = Vec::new();
        match self.energy {
            EnergyKind::Zero => {}
            EnergyKind::KellerSegel { p, chi } => {
                let alpha = self.ks_alpha()?;
                if !(p > alpha && p.is_finite()) {
                    return Err(Error::OutOfRange { name: "p", value: p, constraint: "p>α" });
                }
                // With d = 2 the coupled range is alpha < p <= 1 + alpha; p = alpha is critical.
                if chi != 0.0 && p > 1.0 + alpha {
                    return Err(Error::OutOfRange { name: "p", value: p, constraint: "α<p≤1+α when χ≠0" });
                }
                if !chi.is_finite() {
                    return Err(Error::OutOfRange { name: "chi", value: chi, constraint: "finite χ" });
                }
                if p - alpha < 1e-3 {
                    warnings.push(format!("p={p} is close to the critical exponent {alpha}; χ must be small"));
                }
            }
            EnergyKind::CahnHilliard { g } => {
                if !self.reg.saturation().is_finite() {
                    g.check_condition(&self.reg, 2.0)?;
                } else {
                    g.check_condition(&self.reg, 0.0)?;
                }
            }
        }
        Ok(warnings)
    }
}

/// Per-step record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub mass: f64,
    pub min: f64,
    pub max: f64,
    /// Energy of the new iterate (with the chemical field frozen for the step).
    pub energy: f64,
    /// Action of the computed path, the step's `W^2`.
    pub w2: f64,
    /// `E(u^k) - E(u^{k+1}) - W^2 / (2 tau)`; nonnegative for an exact minimizer.
    pub psi_slack: f64,
    pub mass_drift: f64,
    pub iterations: usize,
    pub converged: bool,
    pub v_min: Option<f64>,
    pub v_mass: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct JkoTrajectory {
    /// `(step, u)` at the output cadence, starting with step 0.
    pub u: Vec<(usize, ScalarField)>,
    pub v: Vec<(usize, ScalarField)>,
    pub steps: Vec<StepDiagnostics>,
    pub warnings: Vec<String>,
}

impl JkoTrajectory {
    pub fn last_u(&self) -> &ScalarField {
        &self.u.last().expect("initial iterate stored").1
    }
}

fn check_initial(config: &JkoRunConfig, u0: &ScalarField) -> Result<()> {
    let top = config.reg.saturation();
    let (lo, hi) = (u0.min(), u0.max());
    if lo < 0.0 {
        return Err(Error::NegativeDensity(lo));
    }
    if hi > top {
        return Err(Error::OutOfRange { name: "u0", value: hi, constraint: "u0≤M" });
    }
    if matches!(config.energy, EnergyKind::KellerSegel { .. }) {
        let m = u0.mass();
        if (m - 1.0).abs() > MASS_TOL {
            return Err(Error::MassMismatch { mass0: m, mass1: 1.0, gap: (m - 1.0).abs() });
        }
    }
    Ok(())
}

/// Runs `n_steps` minimizing-movement steps from `u0` (and `v0` for
/// Keller-Segel, with one implicit `v` step after each `u` step).
pub fn jko_run(config: &JkoRunConfig, u0: &ScalarField, v0: Option<&ScalarField>) -> Result<JkoTrajectory> {
    let warnings = config.validate()?;
    check_initial(config, u0)?;
    let mut v = match (config.energy, v0) {
        (EnergyKind::KellerSegel { .. }, Some(v0)) => {
            same_grid(u0.grid(), v0.grid())?;
            if v0.min() < 0.0 {
                return Err(Error::NegativeDensity(v0.min()));
            }
            Some(v0.clone())
        }
        (EnergyKind::KellerSegel { .. }, None) => Some(ScalarField::zeros(u0.grid())),
        _ => None,
    };
    let mut traj = JkoTrajectory { u: vec![(0, u0.clone())], v: Vec::new(), steps: Vec::new(), warnings };
    if let Some(v) = &v {
        traj.v.push((0, v.clone()));
    }
    let mass0 = u0.mass();
    let mut u = u0.clone();
    for step in 1..=config.n_steps {
        let energy = match config.energy {
            EnergyKind::Zero => Energy::Zero,
            EnergyKind::KellerSegel { p, chi } => Energy::KsInternal {
                p,
                alpha: config.ks_alpha()?,
                chi,
                v: v.clone().expect("chemical field present"),
            },
            EnergyKind::CahnHilliard { g } => Energy::CahnHilliard { g },
        };
        let e_prev = energy.eval(&u)?;
        let inner = jko_inner_minimize(&u, &energy, config.tau, &config.reg, &config.transport, Some(&u))?;
        let next = inner.minimizer;
        let e_next = energy.eval(&next)?;
        let mass = next.mass();
        let mass_drift = (mass - mass0).abs();
        if mass_drift > MASS_TOL * mass0.max(1.0) {
            return Err(Error::MassMismatch { mass0, mass1: mass, gap: mass_drift });
        }
        let mut diag = StepDiagnostics {
            step,
            mass,
            min: next.min(),
            max: next.max(),
            energy: e_next,
            w2: inner.w2,
            psi_slack: e_prev - e_next - inner.w2 / (2.0 * config.tau),
            mass_drift,
            iterations: inner.diagnostics.iterations,
            converged: inner.diagnostics.converged,
            v_min: None,
            v_mass: None,
        };
        if let Some(vk) = &mut v {
            *vk = ks_v_step(vk, &next, config.tau)?;
            diag.v_min = Some(vk.min());
            diag.v_mass = Some(vk.mass());
        }
        u = next;
        traj.steps.push(diag);
        if step % config.output_every == 0 || step == config.n_steps {
            traj.u.push((step, u.clone()));
            if let Some(vk) = &v {
                traj.v.push((step, vk.clone()));
            }
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DomainGrid;
    use crate::shape::Shape;
    use std::sync::Arc;

    fn square(n: usize) -> Arc<DomainGrid> {
        Arc::new(DomainGrid::build(Shape::Square, n).unwrap())
    }

    fn smooth(g: &Arc<DomainGrid>) -> ScalarField {
        ScalarField::from_fn(g, |x, y| 1.0 + 0.3 * (std::f64::consts::PI * x).cos() * (std::f64::consts::PI * y).cos())
    }

    fn perturbation(g: &Arc<DomainGrid>) -> ScalarField {
        let w = ScalarField::from_fn(g, |x, y| (2.0 * std::f64::consts::PI * x).cos() + (std::f64::consts::PI * y).sin());
        let mean = w.integral() / g.area();
        w.map(|v| v - mean)
    }

    fn directional(e: &Energy, u: &ScalarField, w: &ScalarField, s: f64) -> f64 {
        let plus = u.axpby(1.0, w, s).unwrap();
        let minus = u.axpby(1.0, w, -s).unwrap();
        (e.eval(&plus).unwrap() - e.eval(&minus).unwrap()) / (2.0 * s)
    }

    #[test]
    fn zero_energy_is_zero() {
        let g = square(8);
        let u = smooth(&g);
        assert_eq!(Energy::Zero.eval(&u).unwrap(), 0.0);
        assert_eq!(Energy::Zero.first_variation(&u).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn dirichlet_first_variation_is_minus_laplacian() {
        // G = 0 through theta = 0.
        let g = square(16);
        let e = Energy::CahnHilliard { g: GSpec::BinaryAlloy { theta: 0.0 } };
        let u = smooth(&g);
        let w = perturbation(&g);
        let exact = e.first_variation(&u).unwrap().inner(&w).unwrap();
        let lap = neumann_laplacian(&u).inner(&w).unwrap();
        assert!((exact + lap).abs() < 1e-12);
        let errs: Vec<f64> = [1e-3, 1e-4].iter().map(|&s| (directional(&e, &u, &w, s) - exact).abs()).collect();
        // A quadratic energy: the central difference is exact up to roundoff.
        assert!(errs.iter().all(|&x| x < 1e-8 * exact.abs().max(1.0)), "{errs:?}");
    }

    #[test]
    fn directional_derivatives_are_second_order() {
        let g = square(16);
        let v = ScalarField::from_fn(&g, |x, _| x);
        let u = smooth(&g);
        let w = perturbation(&g);
        for e in [
            Energy::KsInternal { p: 1.4, alpha: 0.5, chi: 1.0, v },
            Energy::CahnHilliard { g: GSpec::BinaryAlloy { theta: 1.0 } },
            Energy::CahnHilliard { g: GSpec::ThinFilm { kappa: 1.0, alpha: 0.5, beta: 1.5 } },
        ] {
            let exact = e.first_variation(&u).unwrap().inner(&w).unwrap();
            let e3 = (directional(&e, &u, &w, 1e-2) - exact).abs();
            let e4 = (directional(&e, &u, &w, 1e-3) - exact).abs();
            assert!(e4 <= 0.02 * e3 + 1e-11, "{e:?}: {e3:e} {e4:e}");
        }
    }

    #[test]
    fn ks_potential_reproduces_porous_medium_flux() {
        // m(u) grad Phi'(u) = grad u^p for m = u^alpha, checked on face differences.
        let (p, alpha) = (2.0, 0.5);
        let mut errs = Vec::new();
        for n in [16, 32] {
            let g = square(n);
            let u = smooth(&g);
            let d = Energy::KsInternal { p, alpha, chi: 0.0, v: ScalarField::zeros(&g) }.first_variation(&u).unwrap();
            let mut worst: f64 = 0.0;
            for &[a, b] in g.x_faces().iter().chain(g.y_faces()) {
                let um = 0.5 * (u.values[a] + u.values[b]);
                let lhs = um.powf(alpha) * (d.values[b] - d.values[a]);
                let rhs = u.values[b].powf(p) - u.values[a].powf(p);
                worst = worst.max((lhs - rhs).abs() / g.h());
            }
            errs.push(worst);
        }
        assert!(errs[0] < 0.05 && errs[1] < 0.3 * errs[0], "{errs:?}");
        assert_eq!(ks_phi(2.0, 0.5, 1.0)[1], 4.0 / 3.0);
    }

    #[test]
    fn v_step_conserves_the_discrete_mass_balance() {
        let g = square(16);
        let u = smooth(&g).normalized().unwrap();
        let v = ScalarField::from_fn(&g, |x, y| x * y);
        let tau = 1e-2;
        let next = ks_v_step(&v, &u, tau).unwrap();
        assert!((next.mass() * (1.0 + tau) - v.mass() - tau * u.mass()).abs() <= 1e-10);
        assert!(next.min() >= 0.0);
        let c = ScalarField::constant(&g, 0.7);
        let same = ks_v_step(&c, &c, tau).unwrap();
        assert!(same.values.iter().all(|x| (x - 0.7).abs() < 1e-10));
    }

    fn quick_opts() -> TransportSolveOptions {
        TransportSolveOptions { n_time: 4, max_iters: 8000, ..TransportSolveOptions::default() }
    }

    #[test]
    fn zero_energy_stays_put() {
        let g = square(8);
        let u0 = smooth(&g).normalized().unwrap();
        let reg = Mobility::Power { alpha: 0.5 }.regularize(0.1).unwrap();
        let cfg = JkoRunConfig {
            tau: 1e-2,
            n_steps: 2,
            reg,
            energy: EnergyKind::Zero,
            transport: quick_opts(),
            output_every: 1,
        };
        let t = jko_run(&cfg, &u0, None).unwrap();
        let last = t.last_u();
        assert!(last.axpby(1.0, &u0, -1.0).unwrap().max_abs() < 1e-5);
        assert!(t.steps.iter().all(|s| s.w2 < 1e-10 && s.mass_drift < 1e-12));
    }

    #[test]
    fn run_configuration_is_validated() {
        let g = square(8);
        let u0 = smooth(&g).normalized().unwrap();
        let reg = Mobility::Power { alpha: 0.5 }.regularize(0.1).unwrap();
        let mut cfg = JkoRunConfig {
            tau: 1e-3,
            n_steps: 1,
            reg,
            energy: EnergyKind::KellerSegel { p: 1.6, chi: 1.0 },
            transport: quick_opts(),
            output_every: 1,
        };
        assert!(matches!(cfg.validate(), Err(Error::OutOfRange { name: "p", .. })));
        cfg.energy = EnergyKind::KellerSegel { p: 1.4, chi: 1.0 };
        assert!(cfg.validate().unwrap().is_empty());
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg.tau = 1e-3;
        let heavy = u0.scaled(2.0);
        assert!(matches!(jko_run(&cfg, &heavy, None), Err(Error::MassMismatch { .. })));
    }

    #[test]
    fn ks_step_dissipates_and_keeps_v_nonnegative() {
        let g = square(12);
        let u0 = ScalarField::from_fn(&g, |x, y| 0.2 + (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / 0.02).exp())
            .normalized()
            .unwrap();
        let reg = Mobility::Power { alpha: 0.5 }.regularize(0.05).unwrap();
        let cfg = JkoRunConfig {
            tau: 1e-3,
            n_steps: 2,
            reg,
            energy: EnergyKind::KellerSegel { p: 1.4, chi: 1.0 },
            transport: TransportSolveOptions { n_time: 4, ..TransportSolveOptions::default() },
            output_every: 1,
        };
        let t = jko_run(&cfg, &u0, None).unwrap();
        for s in &t.steps {
            assert!(s.psi_slack >= -1e-8, "{s:?}");
            assert!(s.v_min.unwrap() >= 0.0 && s.mass_drift < 1e-10);
        }
        assert!(t.steps[1].energy <= t.steps[0].energy + 1e-10);
    }
}
