//! Subcommand pipelines. Each returns the list of failed post-conditions;
//! an empty list means exit status 0.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mobiflow_core::battery::{
    bochner_residual, boundary_ratios, deep_cells, hessian_integrals, kato_check, rms_over, Battery, CosineSeries,
    BOCHNER_DEPTH,
};
use mobiflow_core::calculus::{frobenius, hessian};
use mobiflow_core::evi::{evi_step_check, evi_terms, CurveSpec, EviSetup, Potential};
use mobiflow_core::io::{fmt_f64, save_field, save_pgm, Table};
use mobiflow_core::jko::{jko_run, Energy, EnergyKind, GSpec, JkoRunConfig};
use mobiflow_core::kernels::{reference_ch_observed, reference_ks_observed, reference_pme_observed};
use mobiflow_core::transport::{wm_distance, TransportSolveOptions};
use mobiflow_core::{DomainGrid, ScalarField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{self, Config, DOMAIN_KEYS, MOBILITY_KEYS};
use crate::manifest::RunManifest;

/// Failed post-conditions, one message each.
pub type Failures = Vec<String>;

const TRANSPORT_KEYS: &[&str] = &["n_time", "max_iters", "tol_residual", "balance"];

fn keys(groups: &[&[&'static str]]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

fn transport_opts(cfg: &Config, n_time: usize) -> Result<TransportSolveOptions> {
    let d = TransportSolveOptions::default();
    Ok(TransportSolveOptions {
        n_time: cfg.get("n_time", n_time)?,
        max_iters: cfg.get("max_iters", d.max_iters)?,
        tol_residual: cfg.get("tol_residual", d.tol_residual)?,
        balance: cfg.get("balance", d.balance)?,
        ..d
    })
}

fn output_dir(cfg: &Config) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.string("output", "mobiflow-out"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn new(command: &str, cfg: &Config, seed: u64) -> Result<Self> {
        Ok(Run { dir: output_dir(cfg)?, manifest: RunManifest::start(command, &cfg.text, seed) })
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<PathBuf> {
        let path = self.dir.join(name);
        t.save(&path).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.record(&path);
        Ok(path)
    }

    fn field(&mut self, name: &str, f: &ScalarField) -> Result<()> {
        let path = self.dir.join(name);
        save_field(&path, f)?;
        self.manifest.record(&path);
        Ok(())
    }

    fn image(&mut self, name: &str, f: &ScalarField) -> Result<()> {
        let path = self.dir.join(name);
        save_pgm(&path, f)?;
        self.manifest.record(&path);
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let path = self.manifest.finish(&self.dir)?;
        eprintln!("manifest: {}", path.display());
        Ok(())
    }
}

pub fn distance(cfg: &Config) -> Result<Failures> {
    cfg.restrict(&keys(&[DOMAIN_KEYS, MOBILITY_KEYS, TRANSPORT_KEYS, &["mu0", "mu1"]]), "distance")?;
    let grid = config::grid(cfg, "square", 16)?;
    let reg = config::mobility(cfg, "power:alpha=0.5", 0.1)?;
    let seed = cfg.get("seed", 0u64)?;
    let mu0 = config::density(cfg, "mu0", "bump:x=0.35,y=0.5,width=0.1", &grid, seed)?;
    let mu1 = config::density(cfg, "mu1", "bump:x=0.65,y=0.5,width=0.1", &grid, seed)?;
    let opts = transport_opts(cfg, 16)?;
    let mut run = Run::new("distance", cfg, seed)?;
    let (d, path, diag) = wm_distance(&mu0, &mu1, &reg, &opts)?;
    let mut t = Table::new(&["distance", "action", "continuity_residual", "iters"]);
    t.push(vec![fmt_f64(d), fmt_f64(path.action), fmt_f64(diag.continuity_residual), diag.iterations.to_string()])?;
    t.write(std::io::stdout())?;
    run.table("distance.csv", &t)?;
    run.finish()?;
    let mut fails = Failures::new();
    if !diag.converged {
        fails.push(format!(
            "transport solver stopped after {} iterations (continuity residual {:e})",
            diag.iterations, diag.continuity_residual
        ));
    }
    Ok(fails)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JkoKind {
    Ks,
    Ch,
}

pub fn jko(kind: JkoKind, cfg: &Config) -> Result<Failures> {
    let common: &[&str] = &["tau", "steps", "u0", "output_every", "pgm", "psi_tol"];
    let specific: &[&str] = match kind {
        JkoKind::Ks => &["p", "chi", "v0"],
        JkoKind::Ch => &["g"],
    };
    cfg.restrict(&keys(&[DOMAIN_KEYS, MOBILITY_KEYS, TRANSPORT_KEYS, common, specific]), "jko")?;
    let seed = cfg.get("seed", 0u64)?;
    let (reg, energy, u0, v0) = match kind {
        JkoKind::Ks => {
            let grid = config::grid(cfg, "pacman", 32)?;
            let reg = config::mobility(cfg, "power:alpha=0.5", 0.01)?;
            let energy = EnergyKind::KellerSegel { p: cfg.get("p", 1.4)?, chi: cfg.get("chi", 1.0)? };
            let u0 = config::density(cfg, "u0", "bump:x=0.35,y=0.5,width=0.08,floor=0.1", &grid, seed)?;
            let v0 = config::density(cfg, "v0", "zero", &grid, seed)?;
            (reg, energy, u0, Some(v0))
        }
        JkoKind::Ch => {
            let grid = config::grid(cfg, "square", 32)?;
            let reg = config::mobility(cfg, "bounded_power:alpha=1,M=1", 0.01)?;
            let g: GSpec = cfg.string("g", "binary_alloy:theta=1").parse().map_err(|e| cfg.at("g", e))?;
            let u0 = config::density(cfg, "u0", "perturbed:mean=0.5,amp=0.1", &grid, seed)?;
            (reg, EnergyKind::CahnHilliard { g }, u0, None)
        }
    };
    let run_cfg = JkoRunConfig {
        tau: cfg.get("tau", 1e-3)?,
        n_steps: cfg.get("steps", 10usize)?,
        reg,
        energy,
        transport: transport_opts(cfg, 4)?,
        output_every: cfg.get("output_every", 1usize)?,
    };
    let pgm: bool = cfg.get("pgm", false)?;
    let psi_tol: f64 = cfg.get("psi_tol", 1e-8)?;
    let warnings = run_cfg.validate().map_err(|e| cfg.at("p", e))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let label = match kind {
        JkoKind::Ks => "jko ks",
        JkoKind::Ch => "jko ch",
    };
    let mut run = Run::new(label, cfg, seed)?;
    let traj = jko_run(&run_cfg, &u0, v0.as_ref())?;
    let mut t = Table::new(&["step", "mass", "min", "max", "energy", "w2", "psi_slack"]);
    let mut fails = Failures::new();
    let top = reg.saturation();
    for s in &traj.steps {
        t.push(vec![
            s.step.to_string(),
            fmt_f64(s.mass),
            fmt_f64(s.min),
            fmt_f64(s.max),
            fmt_f64(s.energy),
            fmt_f64(s.w2),
            fmt_f64(s.psi_slack),
        ])?;
        if s.psi_slack < -psi_tol {
            fails.push(format!("step {}: Ψ-slack {:e} below -{psi_tol:e}", s.step, s.psi_slack));
        }
        if s.min < 0.0 || s.max > top {
            fails.push(format!("step {}: density range [{}, {}] leaves [0, {top}]", s.step, s.min, s.max));
        }
        if let Some(vmin) = s.v_min {
            if vmin < 0.0 {
                fails.push(format!("step {}: chemical concentration min {vmin:e} < 0", s.step));
            }
        }
    }
    run.table("steps.csv", &t)?;
    for (step, u) in &traj.u {
        run.field(&format!("u_{step:04}.mfg"), u)?;
        if pgm {
            run.image(&format!("u_{step:04}.pgm"), u)?;
        }
    }
    for (step, v) in &traj.v {
        run.field(&format!("v_{step:04}.mfg"), v)?;
    }
    run.finish()?;
    eprintln!("{} steps, final energy {}", traj.steps.len(), traj.steps.last().map_or(f64::NAN, |s| s.energy));
    Ok(fails)
}

fn battery(cfg: &Config, default_samples: usize) -> Result<Battery> {
    let d = Battery::default();
    Ok(Battery {
        seed: cfg.get("seed", d.seed)?,
        n_samples: cfg.get("samples", default_samples)?,
        max_mode: cfg.get("max_mode", d.max_mode)?,
        decay: cfg.get("decay", d.decay)?,
    })
}

pub fn evi_check(cfg: &Config) -> Result<Failures> {
    let own: &[&str] = &[
        "mode",
        "delta",
        "curve_a",
        "curve_b",
        "z",
        "h",
        "potential_scale",
        "potential_seed",
        "samples",
        "max_mode",
        "decay",
        "dt",
        "dz",
    ];
    cfg.restrict(&keys(&[DOMAIN_KEYS, MOBILITY_KEYS, TRANSPORT_KEYS, own]), "evi-check")?;
    let mode = cfg.string("mode", "terms");
    let (default_shape, default_n) = if mode == "step" { ("disc", 16) } else { ("pacman", 32) };
    let grid = config::grid(cfg, default_shape, default_n)?;
    let reg = config::mobility(cfg, "power:alpha=0.5", 0.1)?;
    let seed = cfg.get("seed", Battery::default().seed)?;
    let scale: f64 = cfg.get("potential_scale", 1.0)?;
    let pot_seed: u64 = cfg.get("potential_seed", 11u64)?;
    let series = CosineSeries::random(&mut ChaCha8Rng::seed_from_u64(pot_seed), 2, 1.0);
    let potential = Potential::projected_cosine(&grid, &series, scale)?;
    let mut setup = EviSetup::new(reg, cfg.get("delta", 0.5)?, potential, &battery(cfg, 100)?)?;
    setup.dt = cfg.get("dt", setup.dt)?;
    setup.dz = cfg.get("dz", setup.dz)?;
    let a = config::density(cfg, "curve_a", "bump:x=0.33,y=0.5,width=0.1,floor=0.3", &grid, seed)?;
    let b = config::density(cfg, "curve_b", "bump:x=0.5,y=0.3,width=0.1,floor=0.3", &grid, seed)?;
    let mut run = Run::new("evi-check", cfg, seed)?;
    let c = &setup.constants;
    let mut consts = Table::new(&["name", "value"]);
    for (k, v) in [
        ("lambda_delta", setup.lambda),
        ("c_omega", c.c_omega),
        ("trace", c.trace),
        ("sigma", c.sigma),
        ("c", c.c),
        ("grad_phi_inf", setup.potential.grad_inf),
        ("hess_phi_inf", setup.potential.hess_inf),
        ("delta", setup.delta),
        ("epsilon", reg.eps),
    ] {
        consts.push(vec![k.to_string(), fmt_f64(v)])?;
    }
    run.table("constants.csv", &consts)?;
    let mut fails = Failures::new();
    match mode.as_str() {
        "terms" => {
            let curve = CurveSpec::mixture(&a, &b)?;
            let header = [
                "z", "h", "a", "da_dh", "df_dz", "j1", "j2", "j3", "j4", "j5", "j3_bound", "j4_bound", "j5_bound",
                "lambda", "lhs", "rhs", "slack", "tol_disc", "identity_gap", "duality_gap",
            ];
            let mut t = Table::new(&header);
            for &z in &cfg.list("z", &[0.25, 0.5, 0.75])? {
                for &h in &cfg.list("h", &[0.02, 0.01])? {
                    let r = evi_terms(&curve, &setup, z, h)?;
                    let j = r.terms.j;
                    t.push_numbers(&[
                        z,
                        h,
                        r.a_h,
                        r.da_dh.extrapolated,
                        r.df_dz.extrapolated,
                        j[0],
                        j[1],
                        j[2],
                        j[3],
                        j[4],
                        r.terms.j3_bound,
                        r.terms.j4_bound,
                        r.terms.j5_bound,
                        r.lambda,
                        r.lhs,
                        r.rhs,
                        r.slack,
                        r.tol_disc,
                        r.identity_gap,
                        r.duality_gap,
                    ])?;
                    if j[0] > 0.0 || j[1] > 0.0 {
                        fails.push(format!("z={z} h={h}: J1={:e} J2={:e} must be ≤ 0", j[0], j[1]));
                    }
                    if j[2].abs() > r.terms.j3_bound || j[3].abs() > r.terms.j4_bound {
                        fails.push(format!("z={z} h={h}: J3 or J4 exceeds its bound"));
                    }
                    if r.slack < -r.tol_disc {
                        fails.push(format!("z={z} h={h}: slack {:e} below -tol_disc {:e}", r.slack, r.tol_disc));
                    }
                }
            }
            run.table("evi.csv", &t)?;
        }
        "step" => {
            let u = a.normalized()?;
            let v = b.normalized()?;
            let rep = evi_step_check(&u, &v, &setup, &cfg.list("h", &[0.04, 0.02, 0.01])?, &transport_opts(cfg, 8)?)?;
            let mut t = Table::new(&["h", "w2", "w2_h", "quotient", "lhs", "rhs", "slack", "solver_tol"]);
            for r in &rep.rows {
                t.push_numbers(&[r.h, rep.w2, r.w2_h, r.quotient, r.lhs, rep.rhs, r.slack, r.solver_tol])?;
            }
            run.table("evi_step.csv", &t)?;
            if !rep.holds {
                fails.push(format!("EVI fails beyond tolerance {:e} at the smallest h", rep.tolerance));
            }
        }
        other => bail!("{}", cfg.at("mode", format!("unknown mode '{other}' (terms|step)"))),
    }
    run.finish()?;
    Ok(fails)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lemma {
    L21,
    L25,
    L47,
    Bochner,
}

impl std::str::FromStr for Lemma {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "21" => Ok(Lemma::L21),
            "25" => Ok(Lemma::L25),
            "47" => Ok(Lemma::L47),
            "bochner" => Ok(Lemma::Bochner),
            other => Err(format!("unknown check '{other}' (21|25|47|bochner)")),
        }
    }
}

fn per_sample(grid: &std::sync::Arc<DomainGrid>, bat: &Battery, which: Lemma) -> Result<Table> {
    let fields = bat.sample(grid)?;
    let cells = deep_cells(grid, BOCHNER_DEPTH);
    let mut t = match which {
        Lemma::L21 => Table::new(&["sample", "max_ratio", "min_ratio", "faces"]),
        Lemma::L25 => Table::new(&["sample", "violation"]),
        Lemma::L47 => Table::new(&["sample", "hess_sq", "lap_sq", "h1_sq", "ratio"]),
        Lemma::Bochner => Table::new(&["sample", "relative_rms"]),
    };
    for (i, f) in fields.iter().enumerate() {
        let s = i.to_string();
        match which {
            Lemma::L21 => {
                let r = boundary_ratios(f);
                let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = r.iter().cloned().fold(f64::INFINITY, f64::min);
                t.push(vec![s, fmt_f64(max), fmt_f64(min), r.len().to_string()])?;
            }
            Lemma::L25 => t.push(vec![s, fmt_f64(kato_check(f))])?,
            Lemma::L47 => {
                let (hs, lap, h1) = hessian_integrals(&f.zero_mean());
                t.push(vec![s, fmt_f64(hs), fmt_f64(lap), fmt_f64(h1), fmt_f64((hs - 2.0 * lap) / h1)])?;
            }
            Lemma::Bochner => {
                let scale = hessian(f).iter().map(|x| frobenius(*x)).fold(0.0, f64::max).max(1e-300);
                t.push(vec![s, fmt_f64(rms_over(&bochner_residual(f), &cells) / (scale * scale))])?;
            }
        }
    }
    Ok(t)
}

pub fn lemma_check(which: Lemma, cfg: &Config) -> Result<Failures> {
    cfg.restrict(&keys(&[DOMAIN_KEYS, &["samples", "max_mode", "decay"]]), "lemma-check")?;
    let grid = config::grid(cfg, "pacman", 64)?;
    let bat = battery(cfg, 20)?;
    let mut run = Run::new("lemma-check", cfg, bat.seed)?;
    let t = per_sample(&grid, &bat, which)?;
    let name = match which {
        Lemma::L21 => "lemma21.csv",
        Lemma::L25 => "lemma25.csv",
        Lemma::L47 => "lemma47.csv",
        Lemma::Bochner => "bochner.csv",
    };
    run.table(name, &t)?;
    run.finish()?;
    let mut fails = Failures::new();
    let nonfinite = t.rows.iter().flatten().any(|c| c.parse::<f64>().map_or(false, |v| v.is_nan()));
    if nonfinite {
        fails.push("a per-sample value is NaN".into());
    }
    if which == Lemma::L21 && t.rows.iter().all(|r| r[3] == "0") {
        fails.push("every sample is degenerate on the boundary".into());
    }
    Ok(fails)
}

pub fn reference(cfg: &Config) -> Result<Failures> {
    let own: &[&str] = &["kind", "p", "chi", "g", "t_end", "dt", "every", "u0", "v0"];
    cfg.restrict(&keys(&[DOMAIN_KEYS, MOBILITY_KEYS, own]), "reference")?;
    let seed = cfg.get("seed", 0u64)?;
    let kind = cfg.string("kind", "pme");
    let grid = config::grid(cfg, if kind == "ks" { "pacman" } else { "square" }, 32)?;
    let t_end: f64 = cfg.get("t_end", 0.02)?;
    let dt: f64 = cfg.get("dt", 1e-5)?;
    let every: usize = cfg.get("every", 100usize)?;
    let mut run = Run::new("reference", cfg, seed)?;
    let mut t = Table::new(&["time", "mass", "min", "max", "energy"]);
    let mut count = 0usize;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut record = |time: f64, u: &ScalarField, e: f64| {
        if count % every == 0 {
            rows.push(vec![time, u.mass(), u.min(), u.max(), e]);
        }
        count += 1;
    };
    let mut errors = Vec::new();
    match kind.as_str() {
        "pme" => {
            let p: f64 = cfg.get("p", 2.0)?;
            let u0 = config::density(cfg, "u0", "bump:x=0.4,y=0.55,width=0.1414,floor=0.3", &grid, seed)?;
            let energy = |u: &ScalarField| {
                u.values.iter().map(|&r| r.max(0.0).powf(p) / (p - 1.0)).sum::<f64>() * u.grid().cell_area()
            };
            record(0.0, &u0, energy(&u0));
            let u = reference_pme_observed(&u0, p, t_end, dt, &mut |s, u, _| record(s, u, energy(u)))?;
            run.field("u_final.mfg", &u)?;
        }
        "ks" => {
            let reg = config::mobility(cfg, "power:alpha=0.5", 0.0)?;
            let alpha = match reg.base {
                mobiflow_core::Mobility::Power { alpha } => alpha,
                _ => bail!("{}", cfg.at("mobility", "Keller-Segel reference needs a power mobility")),
            };
            let (p, chi) = (cfg.get("p", 1.4)?, cfg.get("chi", 1.0)?);
            let u0 = config::density(cfg, "u0", "bump:x=0.35,y=0.5,width=0.08,floor=0.1", &grid, seed)?;
            let v0 = config::density(cfg, "v0", "zero", &grid, seed)?;
            let energy = |u: &ScalarField, v: &ScalarField| {
                Energy::KsInternal { p, alpha, chi, v: v.clone() }.eval(u).unwrap_or(f64::NAN)
            };
            record(0.0, &u0, energy(&u0, &v0));
            let (u, v) = reference_ks_observed(&u0, &v0, p, alpha, chi, t_end, dt, &mut |s, u, v| {
                record(s, u, v.map_or(f64::NAN, |v| energy(u, v)))
            })?;
            run.field("u_final.mfg", &u)?;
            run.field("v_final.mfg", &v)?;
        }
        "ch" => {
            let reg = config::mobility(cfg, "bounded_power:alpha=1,M=1", 0.01)?;
            let g: GSpec = cfg.string("g", "binary_alloy:theta=1").parse().map_err(|e| cfg.at("g", e))?;
            let u0 = config::density(cfg, "u0", "perturbed:mean=0.5,amp=0.1", &grid, seed)?;
            let e = Energy::CahnHilliard { g };
            let energy = |u: &ScalarField| e.eval(u).unwrap_or(f64::NAN);
            record(0.0, &u0, energy(&u0));
            let u = reference_ch_observed(&u0, &reg, &g, t_end, dt, &mut |s, u, _| record(s, u, energy(u)))?;
            run.field("u_final.mfg", &u)?;
        }
        other => bail!("{}", cfg.at("kind", format!("unknown reference '{other}' (pme|ks|ch)"))),
    }
    for r in &rows {
        t.push_numbers(r)?;
        if r.iter().any(|v| v.is_nan()) {
            errors.push(format!("non-finite value at t={}", r[0]));
        }
    }
    run.table("reference.csv", &t)?;
    run.finish()?;
    Ok(errors)
}

/// Summarizes every CSV in `dir` (except a previous summary): one row per
/// numeric column with its count, min, max and last value.
pub fn report(dir: &Path) -> Result<Failures> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != "summary.csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no CSV files in {}", dir.display());
    }
    let mut out = Table::new(&["file", "column", "count", "min", "max", "last"]);
    for path in &files {
        let t = Table::load(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path.file_name().expect("file").to_string_lossy().to_string();
        for (c, col) in t.header.iter().enumerate() {
            let vals: Option<Vec<f64>> = t.rows.iter().map(|r| r.get(c).and_then(|x| x.parse().ok())).collect();
            let Some(vals) = vals.filter(|v| !v.is_empty()) else { continue };
            let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.push(vec![
                name.clone(),
                col.clone(),
                vals.len().to_string(),
                fmt_f64(min),
                fmt_f64(max),
                fmt_f64(*vals.last().expect("nonempty")),
            ])?;
        }
    }
    let path = dir.join("summary.csv");
    out.save(&path)?;
    out.write(std::io::stdout())?;
    Ok(Failures::new())
}
