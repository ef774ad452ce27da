//! Concave mobilities, their regularizations, sup-constants and entropy densities.

use std::fmt;
use std::str::FromStr;

use crate::error::{Condition, Error, Result};

/// A concave mobility `m` with `m(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mobility {
    /// `r^alpha`, `0 < alpha < 1`.
    Power { alpha: f64 },
    /// `log(1 + r)`.
    Log1p,
    /// `r^alpha (r + c)^beta`, `0 < alpha + beta <= 1`, `c > 0`.
    PowerProduct { alpha: f64, beta: f64, c: f64 },
    /// `[r (M - r)]^alpha` on `[0, M]`, `0 < alpha <= 1`.
    BoundedPower { alpha: f64, m_max: f64 },
    /// `r`, the classical quadratic Wasserstein case.
    Linear,
}

impl Mobility {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, value, constraint| Err(Error::OutOfRange { name, value, constraint });
        match *self {
            Mobility::Power { alpha } if !(alpha > 0.0 && alpha < 1.0) => bad("alpha", alpha, "0<α<1"),
            Mobility::PowerProduct { alpha, beta, c } => {
                if !(alpha > 0.0 && beta >= 0.0 && alpha + beta <= 1.0) {
                    bad("alpha+beta", alpha + beta, "0<α+β≤1")
                } else if !(c > 0.0) {
                    bad("c", c, "c>0")
                } else {
                    Ok(())
                }
            }
            Mobility::BoundedPower { alpha, m_max } => {
                if !(alpha > 0.0 && alpha <= 1.0) {
                    bad("alpha", alpha, "0<α≤1")
                } else if !(m_max > 0.0 && m_max.is_finite()) {
                    bad("M", m_max, "0<M<∞")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Saturation level `M`, infinite for the unbounded families.
    pub fn saturation(&self) -> f64 {
        match *self {
            Mobility::BoundedPower { m_max, .. } => m_max,
            _ => f64::INFINITY,
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.saturation().is_finite()
    }

    pub fn regularize(self, eps: f64) -> Result<RegularizedMobility> {
        RegularizedMobility::new(self, eps)
    }
}

impl fmt::Display for Mobility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mobility::Power { alpha } => write!(f, "power:alpha={alpha}"),
            Mobility::Log1p => f.write_str("log1p"),
            Mobility::PowerProduct { alpha, beta, c } => {
                write!(f, "power_product:alpha={alpha},beta={beta},c={c}")
            }
            Mobility::BoundedPower { alpha, m_max } => write!(f, "bounded_power:alpha={alpha},M={m_max}"),
            Mobility::Linear => f.write_str("linear"),
        }
    }
}

impl FromStr for Mobility {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, params) = match s.split_once(':') {
            Some((n, p)) => (n.trim(), p.trim()),
            None => (s.trim(), ""),
        };
        let mut kv = Vec::new();
        for part in params.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("expected key=value in mobility spec, got '{part}'")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad number '{v}' in mobility spec")))?;
            kv.push((k.trim().to_string(), v));
        }
        let mut take = |key: &str| -> Result<f64> {
            let pos = kv
                .iter()
                .position(|(k, _)| k == key)
                .ok_or_else(|| Error::Invalid(format!("mobility '{name}' needs parameter '{key}'")))?;
            Ok(kv.remove(pos).1)
        };
        let mob = match name {
            "power" => Mobility::Power { alpha: take("alpha")? },
            "log1p" => Mobility::Log1p,
            "power_product" => Mobility::PowerProduct {
                alpha: take("alpha")?,
                beta: take("beta")?,
                c: take("c")?,
            },
            "bounded_power" => Mobility::BoundedPower {
                alpha: take("alpha")?,
                m_max: take("M")?,
            },
            "linear" => Mobility::Linear,
            other => return Err(Error::Invalid(format!("unknown mobility '{other}'"))),
        };
        if let Some((k, _)) = kv.first() {
            return Err(Error::Invalid(format!("unknown mobility parameter '{k}'")));
        }
        mob.validate()?;
        Ok(mob)
    }
}

/// `m_eps(r) = m(r + eps)`, or `[(r+eps)(M-r+eps)]^alpha` in the bounded case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizedMobility {
    pub base: Mobility,
    pub eps: f64,
}

/// `L = sup|m'|`, `S = sup|m'' m|`, `R = sup m'^2 / |m'' m|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupConstants {
    pub l: f64,
    pub s: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConditionStatus {
    Satisfied { value: f64 },
    Violated { reason: String },
}

impl ConditionStatus {
    pub fn is_satisfied(&self) -> bool {
        matches!(self, ConditionStatus::Satisfied { .. })
    }
}

impl fmt::Display for ConditionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionStatus::Satisfied { .. } => f.write_str("satisfied"),
            ConditionStatus::Violated { reason } => write!(f, "violated: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub mlsc: ConditionStatus,
    pub ma: ConditionStatus,
}

/// Inputs to the contraction rate `lambda_delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaInputs {
    pub delta: f64,
    pub grad_phi_inf: f64,
    pub hess_phi_inf: f64,
    pub sigma: f64,
    pub c_trace: f64,
    /// Boundary constant used in the admissibility bound on `sigma`.
    pub c_tilde: Option<f64>,
}

/// Upper end of the numeric sup grid for unbounded mobilities.
const FAR: f64 = 1e8;

impl RegularizedMobility {
    pub fn new(base: Mobility, eps: f64) -> Result<Self> {
        base.validate()?;
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::OutOfRange {
                name: "epsilon",
                value: eps,
                constraint: "ε≥0",
            });
        }
        Ok(RegularizedMobility { base, eps })
    }

    pub fn saturation(&self) -> f64 {
        self.base.saturation()
    }

    /// `(m_eps, m_eps', m_eps'')` at `r` in `[0, M]`.
    pub fn eval(&self, r: f64) -> Result<(f64, f64, f64)> {
        let top = self.saturation();
        if !(r >= 0.0 && r <= top) {
            return Err(Error::OutOfRange {
                name: "r",
                value: r,
                constraint: "0≤r≤M",
            });
        }
        let [m, d1, d2] = self.eval_raw(r);
        Ok((m, d1, d2))
    }

    /// Unchecked evaluation; callers guarantee `0 <= r <= M`.
    #[inline]
    pub fn eval_raw(&self, r: f64) -> [f64; 3] {
        let e = self.eps;
        match self.base {
            Mobility::Power { alpha } => {
                let s = r + e;
                let m = s.powf(alpha);
                [m, alpha * m / s, alpha * (alpha - 1.0) * m / (s * s)]
            }
            Mobility::Log1p => {
                let s = 1.0 + r + e;
                [(r + e).ln_1p(), 1.0 / s, -1.0 / (s * s)]
            }
            Mobility::PowerProduct { alpha, beta, c } => {
                let s = r + e;
                let m = s.powf(alpha) * (s + c).powf(beta);
                let a = alpha / s + beta / (s + c);
                let b = alpha / (s * s) + beta / ((s + c) * (s + c));
                [m, m * a, m * (a * a - b)]
            }
            Mobility::BoundedPower { alpha, m_max } => {
                let g = (r + e) * (m_max - r + e);
                let g1 = m_max - 2.0 * r;
                let m = g.powf(alpha);
                if alpha == 1.0 {
                    return [g, g1, -2.0];
                }
                let d1 = alpha * m / g * g1;
                let d2 = alpha * (alpha - 1.0) * m / (g * g) * g1 * g1 - 2.0 * alpha * m / g;
                [m, d1, d2]
            }
            Mobility::Linear => [r + e, 1.0, 0.0],
        }
    }

    /// `m_eps(r)` with `r` clamped into `[0, M]`.
    #[inline]
    pub fn m(&self, r: f64) -> f64 {
        self.eval_raw(r.clamp(0.0, self.saturation()))[0]
    }

    /// Unregularized `m(r)`.
    pub fn base_m(&self, r: f64) -> f64 {
        RegularizedMobility { base: self.base, eps: 0.0 }.m(r)
    }

    /// Sample points for numeric sups: geometric near the endpoints plus uniform.
    pub fn sup_grid(&self, n: usize) -> Vec<f64> {
        let top = self.saturation();
        let mut pts = vec![0.0];
        let lo = 1e-12_f64;
        if top.is_finite() {
            let half = 0.5 * top;
            for i in 0..=n {
                let t = lo * (half / lo).powf(i as f64 / n as f64);
                pts.push(t);
                pts.push(top - t);
                pts.push(top * i as f64 / n as f64);
            }
            pts.push(top);
        } else {
            for i in 0..=n {
                pts.push(lo * (FAR / lo).powf(i as f64 / n as f64));
                pts.push(10.0 * i as f64 / n as f64);
            }
        }
        pts.retain(|r| *r >= 0.0 && *r <= top);
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }

    /// `sup |m_eps'|` without any condition checks; infinite when `m_eps` is
    /// not Lipschitz at the origin.
    pub fn lipschitz(&self) -> f64 {
        if let Mobility::Power { alpha } = self.base {
            return if self.eps > 0.0 {
                alpha / self.eps.powf(1.0 - alpha)
            } else {
                f64::INFINITY
            };
        }
        self.sup_grid(2000)
            .into_iter()
            .map(|r| self.eval_raw(r)[1].abs())
            .fold(0.0, f64::max)
    }

    /// Closed forms for the power family, numeric sups otherwise.
    pub fn sup_constants(&self) -> Result<SupConstants> {
        if self.eps <= 0.0 {
            return Err(Error::ConditionViolated {
                condition: Condition::Mlsc,
                detail: "sup constants need ε>0".into(),
            });
        }
        if let Mobility::Power { alpha } = self.base {
            let e = self.eps;
            return Ok(SupConstants {
                l: alpha / e.powf(1.0 - alpha),
                s: alpha * (1.0 - alpha) / e.powf(2.0 * (1.0 - alpha)),
                r: alpha / (1.0 - alpha),
            });
        }
        self.numeric_sup_constants()
    }

    /// Grid sups with a tail test: a sup attained at the far end of an
    /// unbounded grid signals a divergent supremum.
    pub fn numeric_sup_constants(&self) -> Result<SupConstants> {
        let pts = self.sup_grid(4000);
        let mut best = [(0.0_f64, 0usize); 3];
        let mut ratio_inf = false;
        for (i, &r) in pts.iter().enumerate() {
            let [m, d1, d2] = self.eval_raw(r);
            let vals = [d1.abs(), (d2 * m).abs()];
            for a in 0..2 {
                if vals[a] > best[a].0 {
                    best[a] = (vals[a], i);
                }
            }
            let denom = (d2 * m).abs();
            if denom == 0.0 {
                if d1 != 0.0 {
                    ratio_inf = true;
                }
            } else {
                let q = d1 * d1 / denom;
                if q > best[2].0 {
                    best[2] = (q, i);
                }
            }
        }
        let unbounded = !self.saturation().is_finite();
        let last = pts.len() - 1;
        let tail = |i: usize| unbounded && i + 50 >= last;
        if !best[0].0.is_finite() || !best[1].0.is_finite() || tail(best[0].1) || tail(best[1].1) {
            return Err(Error::ConditionViolated {
                condition: Condition::Mlsc,
                detail: format!("sup|m'|={} sup|m''m|={} not finite", best[0].0, best[1].0),
            });
        }
        if ratio_inf || !best[2].0.is_finite() || tail(best[2].1) {
            return Err(Error::ConditionViolated {
                condition: Condition::Ma,
                detail: "sup m'^2/|m''m| diverges".into(),
            });
        }
        Ok(SupConstants {
            l: best[0].0,
            s: best[1].0,
            r: best[2].0,
        })
    }

    pub fn check_conditions(&self) -> ConditionReport {
        match self.sup_constants() {
            Ok(c) => ConditionReport {
                mlsc: ConditionStatus::Satisfied { value: c.l.max(c.s) },
                ma: ConditionStatus::Satisfied { value: c.r },
            },
            Err(Error::ConditionViolated { condition: Condition::Ma, detail }) => ConditionReport {
                mlsc: ConditionStatus::Satisfied { value: f64::NAN },
                ma: ConditionStatus::Violated { reason: detail },
            },
            Err(e) => ConditionReport {
                mlsc: ConditionStatus::Violated { reason: e.to_string() },
                ma: ConditionStatus::Violated { reason: "not evaluated".into() },
            },
        }
    }

    /// Upper bound on `sup_r (m_eps - m)`.
    pub fn uniform_gap(&self) -> f64 {
        let e = self.eps;
        match self.base {
            Mobility::BoundedPower { alpha, m_max } => {
                ((m_max + e).powf(alpha) + m_max.powf(alpha)) * e.powf(alpha)
            }
            _ => self.base_m(e),
        }
    }

    /// Grid sup of `m_eps - m` over `n` uniform points plus the sup grid.
    pub fn numeric_gap(&self, n: usize) -> f64 {
        let top = self.saturation().min(10.0);
        let mut best: f64 = 0.0;
        let pts = self.sup_grid(2000);
        let uniform = (0..=n).map(|i| top * i as f64 / n as f64);
        for r in pts.into_iter().chain(uniform) {
            best = best.max(self.m(r) - self.base_m(r));
        }
        best
    }

    pub fn lambda_delta(&self, inputs: LambdaInputs) -> Result<f64> {
        let c = self.sup_constants()?;
        if !(inputs.delta > 0.0) {
            return Err(Error::OutOfRange {
                name: "delta",
                value: inputs.delta,
                constraint: "δ>0",
            });
        }
        if !(inputs.sigma > 0.0) {
            return Err(Error::OutOfRange {
                name: "sigma",
                value: inputs.sigma,
                constraint: "σ>0",
            });
        }
        if let Some(ct) = inputs.c_tilde {
            let bound = sigma_bound(ct, c.r);
            if !(inputs.sigma < bound) {
                return Err(Error::OutOfRange {
                    name: "sigma",
                    value: inputs.sigma,
                    constraint: "σ<(1/C̃_Ω)·min{1,1/R}",
                });
            }
        }
        Ok(lambda_formula(c, inputs))
    }
}

/// Admissibility bound `(1/C_tilde) min{1, 1/R}`.
pub fn sigma_bound(c_tilde: f64, r: f64) -> f64 {
    let inv_r = if r > 0.0 { 1.0 / r } else { f64::INFINITY };
    1.0_f64.min(inv_r) / c_tilde
}

/// `-(1/delta) |grad phi|^2 S - |hess phi| L - delta C / sigma`.
pub fn lambda_formula(c: SupConstants, i: LambdaInputs) -> f64 {
    -(1.0 / i.delta) * i.grad_phi_inf * i.grad_phi_inf * c.s
        - i.hess_phi_inf * c.l
        - i.delta * i.c_trace / i.sigma
}

/// Entropy density with `U'' m_eps = 1`, normalized at an anchor `r0`.
#[derive(Debug, Clone)]
pub struct EntropyDensity {
    reg: RegularizedMobility,
    r0: f64,
    cap: f64,
    nodes: Vec<f64>,
    u: Vec<f64>,
    du: Vec<f64>,
}

impl EntropyDensity {
    /// Tabulates on `[0, cap]`, with `cap = 64 / |Omega|` (or `M` when bounded)
    /// and anchor `r0 = 1 / |Omega|`.
    pub fn build(reg: RegularizedMobility, area: f64, r_grid_size: usize) -> Result<Self> {
        let r0 = 1.0 / area;
        let cap = if reg.saturation().is_finite() {
            reg.saturation()
        } else {
            64.0 / area
        };
        Self::build_with(reg, r0, cap, r_grid_size)
    }

    pub fn build_with(reg: RegularizedMobility, r0: f64, cap: f64, r_grid_size: usize) -> Result<Self> {
        if r_grid_size < 256 {
            return Err(Error::OutOfRange {
                name: "r_grid_size",
                value: r_grid_size as f64,
                constraint: "≥256",
            });
        }
        if !(reg.m(0.0) > 0.0) || !(reg.m(cap) > 0.0) {
            return Err(Error::Invalid("entropy density needs m_ε>0 on [0, cap]".into()));
        }
        if !(r0 >= 0.0 && r0 <= cap) {
            return Err(Error::OutOfRange {
                name: "r0",
                value: r0,
                constraint: "0≤r0≤cap",
            });
        }
        let n = r_grid_size;
        let mut nodes: Vec<f64> = (0..=n).map(|i| cap * i as f64 / n as f64).collect();
        // Extra resolution where 1/m_eps varies on the scale of eps.
        let scale = reg.eps.max(1e-6).min(cap);
        for i in 0..=n / 2 {
            let t = scale * 1e-2 * (1e4_f64).powf(i as f64 / (n / 2) as f64);
            if t < cap {
                nodes.push(t);
                if reg.saturation().is_finite() {
                    nodes.push(cap - t);
                }
            }
        }
        nodes.push(r0);
        nodes.sort_by(f64::total_cmp);
        nodes.dedup();
        let anchor = nodes.iter().position(|&r| r == r0).expect("anchor inserted");
        let inv_m = |s: f64| 1.0 / reg.m(s);
        let mut u = vec![0.0; nodes.len()];
        let mut du = vec![0.0; nodes.len()];
        for i in anchor + 1..nodes.len() {
            let (a, b) = (nodes[i - 1], nodes[i]);
            du[i] = du[i - 1] + integrate(&inv_m, a, b);
            u[i] = u[i - 1] + du[i - 1] * (b - a) + integrate(&|s| (b - s) * inv_m(s), a, b);
        }
        for i in (0..anchor).rev() {
            let (a, b) = (nodes[i], nodes[i + 1]);
            du[i] = du[i + 1] - integrate(&inv_m, a, b);
            u[i] = u[i + 1] - du[i + 1] * (b - a) + integrate(&|s| (s - a) * inv_m(s), a, b);
        }
        Ok(EntropyDensity { reg, r0, cap, nodes, u, du })
    }

    pub fn anchor(&self) -> f64 {
        self.r0
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn reg(&self) -> &RegularizedMobility {
        &self.reg
    }

    fn check(&self, r: f64) -> Result<()> {
        if r < 0.0 {
            return Err(Error::NegativeDensity(r));
        }
        if r > self.cap || !r.is_finite() {
            return Err(Error::BeyondCap { value: r, cap: self.cap });
        }
        Ok(())
    }

    fn nearest(&self, r: f64) -> usize {
        let i = self.nodes.partition_point(|&x| x < r);
        if i == 0 {
            0
        } else if i == self.nodes.len() {
            i - 1
        } else if r - self.nodes[i - 1] <= self.nodes[i] - r {
            i - 1
        } else {
            i
        }
    }

    /// `(U(r), U'(r))`.
    pub fn value_and_slope(&self, r: f64) -> Result<(f64, f64)> {
        self.check(r)?;
        let i = self.nearest(r);
        let ri = self.nodes[i];
        if r == ri {
            return Ok((self.u[i], self.du[i]));
        }
        let inv_m = |s: f64| 1.0 / self.reg.m(s);
        let slope = self.du[i] + integrate(&inv_m, ri, r);
        let value = self.u[i] + self.du[i] * (r - ri) + integrate(&|s| (r - s) * inv_m(s), ri, r);
        Ok((value, slope))
    }

    pub fn value(&self, r: f64) -> Result<f64> {
        Ok(self.value_and_slope(r)?.0)
    }

    pub fn slope(&self, r: f64) -> Result<f64> {
        Ok(self.value_and_slope(r)?.1)
    }

    /// `U''(r) = 1 / m_eps(r)`.
    pub fn curvature(&self, r: f64) -> Result<f64> {
        self.check(r)?;
        Ok(1.0 / self.reg.m(r))
    }
}

const GL_X: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL_W: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
    0.236_926_885_056_189_1,
];

fn gauss5(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    GL_X.iter().zip(GL_W).map(|(&x, w)| w * f(c + hw * x)).sum::<f64>() * hw
}

/// Adaptive Gauss-Legendre quadrature of `f` on `[a, b]` (signed).
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let left = gauss5(f, a, m);
        let right = gauss5(f, m, b);
        let sum = left + right;
        if depth == 0 || (sum - whole).abs() <= 1e-14 * sum.abs().max(1e-300) + 1e-300 {
            return sum;
        }
        rec(f, a, m, left, depth - 1) + rec(f, m, b, right, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    rec(f, a, b, gauss5(f, a, b), 40)
}
