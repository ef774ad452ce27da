//! End-to-end acceptance suite. Every criterion runs in one test, in order,
//! so that the wall-clock limits are measured without competing threads.
//! `MOBIFLOW_CRITERIA=3,7` restricts the run to the listed criteria.

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mobiflow_core::battery::{
    bochner_battery, kato_battery, lemma21_estimate, lemma47_best_c, neumann_projected, Battery, CosineSeries,
};
use mobiflow_core::evi::{evi_step_check, evi_terms, smooth_bump, CurveSpec, EviSetup, Potential};
use mobiflow_core::jko::{jko_run, EnergyKind, GSpec, JkoRunConfig};
use mobiflow_core::kernels::reference_pme_solve;
use mobiflow_core::transport::{wm_distance, TransportSolveOptions};
use mobiflow_core::{DomainGrid, Mobility, RegularizedMobility, ScalarField, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

fn grid(shape: Shape, n: usize) -> Arc<DomainGrid> {
    Arc::new(DomainGrid::build(shape, n).unwrap())
}

fn disc() -> Shape {
    Shape::Disc { radius: 0.4 }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn l1_gap(a: &ScalarField, b: &ScalarField) -> f64 {
    let area = a.grid().cell_area();
    let diff: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum();
    let norm: f64 = b.values.iter().map(|y| y.abs()).sum();
    diff * area / (norm * area)
}

fn mass(u: &ScalarField) -> f64 {
    u.values.iter().sum::<f64>() * u.grid().cell_area()
}

fn sup_constants_match_closed_form() -> Outcome {
    let mut worst: f64 = 0.0;
    for alpha in [0.3, 0.5, 0.8] {
        for eps in [0.01, 0.1] {
            let c = Mobility::Power { alpha }.regularize(eps).unwrap().sup_constants().unwrap();
            let l = alpha / eps.powf(1.0 - alpha);
            let s = alpha * (1.0 - alpha) / eps.powf(2.0 * (1.0 - alpha));
            let r = alpha / (1.0 - alpha);
            worst = worst.max(rel(c.l, l)).max(rel(c.s, s)).max(rel(c.r, r));
        }
    }
    Outcome::new(worst <= 1e-12, format!("max relative error {worst:.2e}"))
}

/// Unregularized mobility, written out here rather than taken from the library.
fn base_mobility(m: Mobility, r: f64) -> f64 {
    match m {
        Mobility::Power { alpha } => r.powf(alpha),
        Mobility::BoundedPower { alpha, m_max } => (r * (m_max - r)).max(0.0).powf(alpha),
        _ => unreachable!(),
    }
}

fn regularized_mobility(m: Mobility, eps: f64, r: f64) -> f64 {
    match m {
        Mobility::Power { alpha } => (r + eps).powf(alpha),
        Mobility::BoundedPower { alpha, m_max } => ((r + eps) * (m_max - r + eps)).powf(alpha),
        _ => unreachable!(),
    }
}

fn regularization_gap_bounds() -> Outcome {
    const N: usize = 10_000;
    let epsilons = [0.1, 0.01, 0.001];
    let families = [
        Mobility::BoundedPower { alpha: 0.5, m_max: 1.0 },
        Mobility::BoundedPower { alpha: 1.0, m_max: 1.0 },
        Mobility::Power { alpha: 0.5 },
    ];
    let mut fails = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for m in families {
        let top = if let Mobility::BoundedPower { m_max, .. } = m { m_max } else { 10.0 };
        let pts: Vec<f64> = (0..=N).map(|i| top * i as f64 / N as f64).collect();
        for &eps in &epsilons {
            let reg = m.regularize(eps).unwrap();
            let bound = match m {
                Mobility::BoundedPower { alpha, m_max } => ((m_max + eps).powf(alpha) + m_max.powf(alpha)) * eps.powf(alpha),
                _ => base_mobility(m, eps),
            };
            let ours = pts.iter().map(|&r| regularized_mobility(m, eps, r) - base_mobility(m, r)).fold(0.0, f64::max);
            let lib = reg.numeric_gap(N);
            worst_ratio = worst_ratio.max(ours / bound).max(lib / bound);
            if ours > bound || lib > bound * (1.0 + 1e-12) {
                fails.push(format!("{m} eps={eps}: gap {ours:.3e}/{lib:.3e} > {bound:.3e}"));
            }
            for &r in &pts {
                if (reg.m(r) - regularized_mobility(m, eps, r)).abs() > 1e-12 * (1.0 + reg.m(r)) {
                    fails.push(format!("{m} eps={eps}: m_eps({r}) disagrees with its formula"));
                    break;
                }
            }
        }
        for w in epsilons.windows(2) {
            let (big, small) = (m.regularize(w[0]).unwrap(), m.regularize(w[1]).unwrap());
            if let Some(&r) = pts.iter().find(|&&r| small.m(r) > big.m(r)) {
                fails.push(format!("{m}: m_{} > m_{} at r={r}", w[1], w[0]));
            }
        }
    }
    let detail = if fails.is_empty() { format!("largest gap/bound {worst_ratio:.3}") } else { fails.join("; ") };
    Outcome::new(fails.is_empty(), detail)
}

fn random_density(g: &Arc<DomainGrid>, rng: &mut ChaCha8Rng) -> ScalarField {
    let w = neumann_projected(g, &CosineSeries::random(rng, 3, 0.7)).unwrap();
    let top = w.max_abs().max(1e-12);
    w.map(|v| 1.0 + 0.6 * v / top).normalized().unwrap()
}

fn metric_sanity() -> Outcome {
    let g = grid(disc(), 8);
    let reg = Mobility::Power { alpha: 0.5 }.regularize(0.1).unwrap();
    let opts = TransportSolveOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let d = |a: &ScalarField, b: &ScalarField| {
        let (d, _, diag) = wm_distance(a, b, &reg, &opts).unwrap();
        assert!(diag.converged, "transport solve did not converge");
        d
    };
    let asym_tol = 2.0 * opts.tol_residual;
    let (mut self_max, mut asym_max, mut tri_max): (f64, f64, f64) = (0.0, 0.0, f64::NEG_INFINITY);
    for _ in 0..20 {
        let a = random_density(&g, &mut rng);
        let b = random_density(&g, &mut rng);
        let c = random_density(&g, &mut rng);
        self_max = self_max.max(d(&a, &a));
        let (ab, ba, bc, ac) = (d(&a, &b), d(&b, &a), d(&b, &c), d(&a, &c));
        asym_max = asym_max.max((ab - ba).abs());
        tri_max = tri_max.max(ac / (ab + bc) - 1.0);
    }
    let pass = self_max <= 1e-4 && asym_max <= asym_tol && tri_max <= 0.02;
    Outcome::new(
        pass,
        format!(
            "max d(a,a) {self_max:.2e}, max |d(a,b)-d(b,a)| {asym_max:.2e} (tol {asym_tol:.0e}), max triangle excess {:.2}%",
            100.0 * tri_max.max(0.0)
        ),
    )
}

fn translation_distance() -> Outcome {
    let g = grid(Shape::Square, 32);
    let reg = RegularizedMobility::new(Mobility::Linear, 0.0).unwrap();
    let bump = |cx: f64| {
        ScalarField::from_fn(&g, |x, y| {
            let r = (x - cx).hypot(y - 0.5) / 0.15;
            if r < 1.0 {
                0.5 * (1.0 + (std::f64::consts::PI * r).cos())
            } else {
                0.0
            }
        })
        .normalized()
        .unwrap()
    };
    let opts = TransportSolveOptions { n_time: 16, max_iters: 25_000, ..Default::default() };
    let (d, _, diag) = wm_distance(&bump(0.4), &bump(0.6), &reg, &opts).unwrap();
    let err = rel(d, 0.2);
    Outcome::new(
        err <= 0.05,
        format!(
            "distance {d:.5} (error {:.2}%), {} iterations, converged={}, continuity residual {:.1e}",
            100.0 * err,
            diag.iterations,
            diag.converged,
            diag.continuity_residual
        ),
    )
}

struct Suite {
    kato: f64,
    bochner: f64,
    c_omega: f64,
    best_c: f64,
}

fn suite(shape: Shape, n: usize, battery: &Battery) -> Suite {
    let g = grid(shape, n);
    Suite {
        kato: kato_battery(&g, battery).unwrap(),
        bochner: bochner_battery(&g, battery).unwrap(),
        c_omega: lemma21_estimate(&g, battery).unwrap().c_omega,
        best_c: lemma47_best_c(&g, battery).unwrap(),
    }
}

fn field_batteries() -> Outcome {
    const N: usize = 256;
    let battery = Battery::default();
    let mut fails = Vec::new();
    let mut lines = Vec::new();
    let mut square_c = [0.0; 2];
    let mut pacman_c = [0.0; 2];
    for (name, shape) in [("square", Shape::Square), ("disc", disc()), ("pacman", Shape::Pacman)] {
        let coarse = suite(shape, N, &battery);
        let fine = suite(shape, 2 * N, &battery);
        let kato_ok = fine.kato <= 1e-10 || coarse.kato / fine.kato >= 1.5;
        // First order: halving h must at least take off a third of the residual.
        let bochner_ok = coarse.bochner / fine.bochner >= 1.5;
        let drift = (fine.best_c - coarse.best_c).abs() / coarse.best_c.abs().max(1e-12);
        let best_c_ok = drift <= 0.25;
        for (ok, what) in [(kato_ok, "Kato"), (bochner_ok, "Bochner"), (best_c_ok, "best-C")] {
            if !ok {
                fails.push(format!("{name}: {what}"));
            }
        }
        match name {
            "square" => square_c = [coarse.c_omega, fine.c_omega],
            "pacman" => pacman_c = [coarse.c_omega, fine.c_omega],
            _ => {}
        }
        lines.push(format!(
            "{name}: Kato {:.2e}->{:.2e}, Bochner {:.2e}->{:.2e}, C_Ω {:.3e}->{:.3e}, best C {:.3}->{:.3}",
            coarse.kato, fine.kato, coarse.bochner, fine.bochner, coarse.c_omega, fine.c_omega, coarse.best_c, fine.best_c
        ));
    }
    for (i, n) in [N, 2 * N].into_iter().enumerate() {
        let h = 1.0 / n as f64;
        if square_c[i] > 5.0 * h {
            fails.push(format!("square C_Ω {:.2e} > 5h at {n}²", square_c[i]));
        }
        if pacman_c[i] <= 10.0 * square_c[i].max(h) {
            fails.push(format!("pacman C_Ω {:.2e} not 10× the square's at {n}²", pacman_c[i]));
        }
    }
    let mut detail = lines.join(" | ");
    if !fails.is_empty() {
        detail = format!("{detail} || failed: {}", fails.join(", "));
    }
    Outcome::new(fails.is_empty(), detail)
}

fn differential_inequality() -> Outcome {
    let g = grid(Shape::Pacman, 32);
    let a = smooth_bump(&g, [0.33, 0.5], 0.1, 0.3).unwrap();
    let b = smooth_bump(&g, [0.5, 0.3], 0.1, 0.3).unwrap();
    let curve = CurveSpec::mixture(&a, &b).unwrap();
    let reg = Mobility::Power { alpha: 0.5 }.regularize(0.1).unwrap();
    let series = CosineSeries { terms: vec![(1, 0, 0.3), (0, 1, -0.2), (1, 1, 0.1)], offset: 0.0 };
    let potential = Potential::projected_cosine(&g, &series, 1.0).unwrap();
    let setup = EviSetup::new(reg, 0.5, potential, &Battery::default()).unwrap();
    let mut fails = Vec::new();
    let mut min_margin = f64::INFINITY;
    for z in [0.25, 0.5, 0.75] {
        let mut defects = Vec::new();
        for h in [0.02, 0.01] {
            let r = evi_terms(&curve, &setup, z, h).unwrap();
            let j = r.terms.j;
            if j[0] > 0.0 || j[1] > 0.0 {
                fails.push(format!("z={z} h={h}: J1={:.2e} J2={:.2e}", j[0], j[1]));
            }
            if j[2].abs() > r.terms.j3_bound || j[3].abs() > r.terms.j4_bound {
                fails.push(format!("z={z} h={h}: J3/J4 above bound"));
            }
            let lhs = 0.5 * r.da_dh.extrapolated + r.df_dz.extrapolated;
            let rhs = -r.lambda * z * r.a_h;
            if ((rhs - lhs) - r.slack).abs() > 1e-9 * (1.0 + rhs.abs() + lhs.abs()) {
                fails.push(format!("z={z} h={h}: slack does not equal rhs - lhs"));
            }
            if r.slack < -r.tol_disc {
                fails.push(format!("z={z} h={h}: slack {:.3e} < -tol {:.3e}", r.slack, r.tol_disc));
            }
            min_margin = min_margin.min(r.slack + r.tol_disc);
            defects.push(r.defect());
        }
        if defects[1] > defects[0] {
            fails.push(format!("z={z}: defect grows under h refinement ({:.2e} -> {:.2e})", defects[0], defects[1]));
        }
    }
    let detail = format!("λ_δ {:.1}, smallest slack + tol {min_margin:.3e}", setup.lambda);
    let detail = if fails.is_empty() { detail } else { format!("{detail}; {}", fails.join("; ")) };
    Outcome::new(fails.is_empty(), detail)
}

fn step_inequality() -> Outcome {
    let g = grid(disc(), 32);
    let reg = Mobility::Power { alpha: 0.5 }.regularize(0.1).unwrap();
    let series = CosineSeries::random(&mut ChaCha8Rng::seed_from_u64(11), 2, 1.0);
    let potential = Potential::projected_cosine(&g, &series, 1.0).unwrap();
    let setup = EviSetup::new(reg, 0.5, potential, &Battery::default()).unwrap();
    let u = smooth_bump(&g, [0.4, 0.5], 0.15, 0.3).unwrap();
    let v = smooth_bump(&g, [0.6, 0.45], 0.15, 0.3).unwrap();
    let opts = TransportSolveOptions { n_time: 8, ..Default::default() };
    let rep = evi_step_check(&u, &v, &setup, &[0.04, 0.02, 0.01], &opts).unwrap();
    let (d, _, _) = wm_distance(&u, &v, &reg, &opts).unwrap();
    let last = rep.rows.iter().min_by(|a, b| a.h.total_cmp(&b.h)).unwrap();
    let lhs = (last.w2_h - rep.w2) / (2.0 * last.h) + 0.5 * rep.lambda * rep.w2;
    let excess = lhs - (rep.f_v - rep.f_u);
    let consistent = (d * d - rep.w2).abs() <= 1e-6 * rep.w2 && (lhs - last.lhs).abs() <= 1e-12 * (1.0 + lhs.abs());
    Outcome::new(
        consistent && excess <= rep.tolerance && rep.holds,
        format!(
            "λ_δ {:.1}, W² {:.4e}, lhs {lhs:.4e} vs F(v)-F(u) {:.4e}, excess {excess:.3e} ≤ tol {:.3e}",
            rep.lambda,
            rep.w2,
            rep.f_v - rep.f_u,
            rep.tolerance
        ),
    )
}

fn pme_oracle() -> Outcome {
    let g = grid(Shape::Square, 32);
    let u0 = ScalarField::from_fn(&g, |x, y| 0.3 + (-((x - 0.4).powi(2) + (y - 0.55).powi(2)) / 0.02).exp())
        .normalized()
        .unwrap();
    let cfg = JkoRunConfig {
        tau: 1e-3,
        n_steps: 20,
        reg: Mobility::Power { alpha: 0.5 }.regularize(1e-3).unwrap(),
        energy: EnergyKind::KellerSegel { p: 2.0, chi: 0.0 },
        transport: TransportSolveOptions { n_time: 4, ..Default::default() },
        output_every: 20,
    };
    let traj = jko_run(&cfg, &u0, None).unwrap();
    let reference = reference_pme_solve(&u0, 2.0, 0.02, 1e-5).unwrap();
    let gap = l1_gap(traj.last_u(), &reference);
    let m0 = mass(&u0);
    let drift = traj.steps.iter().map(|s| s.mass_drift).fold(0.0, f64::max);
    let ref_drift = (mass(&reference) - m0).abs();
    let slack = traj.steps.iter().map(|s| s.psi_slack).fold(f64::INFINITY, f64::min);
    let final_drift = (mass(traj.last_u()) - m0).abs();
    Outcome::new(
        traj.steps.len() == 20 && gap <= 0.10 && drift <= 1e-8 && final_drift <= 1e-8 && slack >= -1e-8,
        format!(
            "L¹ gap {:.2}%, max mass drift {drift:.1e} (reference {ref_drift:.1e}), min Ψ-slack {slack:.3e}",
            100.0 * gap
        ),
    )
}

fn cahn_hilliard() -> Outcome {
    let g = grid(Shape::Square, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = neumann_projected(&g, &CosineSeries::random(&mut rng, 4, 0.5)).unwrap().zero_mean();
    let top = w.max_abs();
    let u0 = w.map(|v| 0.5 + 0.1 * v / top);
    let cfg = JkoRunConfig {
        tau: 1e-3,
        n_steps: 30,
        reg: Mobility::BoundedPower { alpha: 1.0, m_max: 1.0 }.regularize(0.01).unwrap(),
        energy: EnergyKind::CahnHilliard { g: GSpec::BinaryAlloy { theta: 1.0 } },
        transport: TransportSolveOptions { n_time: 4, ..Default::default() },
        output_every: 30,
    };
    let traj = jko_run(&cfg, &u0, None).unwrap();
    let m0 = mass(&u0);
    let energies: Vec<f64> = traj.steps.iter().map(|s| s.energy).collect();
    let increases = energies.windows(2).filter(|w| w[1] > w[0]).count();
    let lo = traj.steps.iter().map(|s| s.min).fold(f64::INFINITY, f64::min);
    let hi = traj.steps.iter().map(|s| s.max).fold(f64::NEG_INFINITY, f64::max);
    let drift = traj.steps.iter().map(|s| s.mass_drift).fold(0.0, f64::max).max((mass(traj.last_u()) - m0).abs());
    let last = traj.last_u();
    let in_range = last.values.iter().all(|&r| (0.0..=1.0).contains(&r));
    Outcome::new(
        traj.steps.len() == 30 && increases == 0 && lo >= 0.0 && hi <= 1.0 && in_range && drift <= 1e-8,
        format!(
            "E {:.6e} -> {:.6e} ({increases} increases), u in [{lo:.4}, {hi:.4}], mass drift {drift:.1e}",
            energies[0],
            energies[energies.len() - 1]
        ),
    )
}

fn keller_segel() -> Outcome {
    let g = grid(Shape::Pacman, 32);
    let u0 = smooth_bump(&g, [0.35, 0.5], 0.08, 0.1).unwrap();
    let cfg = JkoRunConfig {
        tau: 1e-3,
        n_steps: 30,
        reg: Mobility::Power { alpha: 0.5 }.regularize(0.01).unwrap(),
        energy: EnergyKind::KellerSegel { p: 1.4, chi: 1.0 },
        transport: TransportSolveOptions { n_time: 4, ..Default::default() },
        output_every: 30,
    };
    let traj = jko_run(&cfg, &u0, None).unwrap();
    let sup0 = u0.max();
    let sup = traj.steps.iter().map(|s| s.max).fold(sup0, f64::max);
    let v_min = traj.steps.iter().filter_map(|s| s.v_min).fold(f64::INFINITY, f64::min);
    let drift = traj.steps.iter().map(|s| s.mass_drift).fold(0.0, f64::max);
    let slack = traj.steps.iter().map(|s| s.psi_slack).fold(f64::INFINITY, f64::min);
    let u_min = traj.steps.iter().map(|s| s.min).fold(f64::INFINITY, f64::min);
    let pass = traj.steps.len() == 30 && sup <= 5.0 * sup0 && v_min >= 0.0 && drift <= 1e-8 && slack >= -1e-8 && u_min >= 0.0;
    Outcome::new(
        pass,
        format!(
            "sup u {sup0:.3} -> max {sup:.3} ({:.2}×), min v {v_min:.2e}, min u {u_min:.2e}, mass drift {drift:.1e}, min Ψ-slack {slack:.2e}",
            sup / sup0
        ),
    )
}

#[test]
fn acceptance() {
    let only: Option<Vec<usize>> = std::env::var("MOBIFLOW_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("mobility sup-constants", 1, sup_constants_match_closed_form),
        ("regularization gap bounds", 1, regularization_gap_bounds),
        ("metric sanity on the disc", 120, metric_sanity),
        ("W2 translation distance", 120, translation_distance),
        ("Kato/Bochner/boundary/Hessian batteries", 300, field_batteries),
        ("differential inequality along a curve", 600, differential_inequality),
        ("step inequality", 600, step_inequality),
        ("minimizing movement vs porous medium", 900, pme_oracle),
        ("Cahn-Hilliard run", 1200, cahn_hilliard),
        ("Keller-Segel run", 1200, keller_segel),
    ];
    let mut failed = Vec::new();
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let out = run();
        let took = t0.elapsed();
        let in_time = took <= Duration::from_secs(limit);
        let pass = out.pass && in_time;
        // Written to the stderr handle directly so the line survives output capture.
        writeln!(
            std::io::stderr(),
            "criterion {id:2} {} {name}: {} [{:.1}s / {limit}s]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        )
        .unwrap();
        if !pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
