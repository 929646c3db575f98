//! Empirical full-stability harness.
//!
//! Pairs of tilted and perturbed problems are drawn around a base point
//! `(ū*, ē)`, solved from the base equilibrium, and tested against
//!
//! ```text
//! ‖Δu* − 2κ Δϑ‖ ≤ ‖Δu*‖ + ℓ ‖Δe‖          (Lipschitzian)
//! ‖Δu* − 2κ Δϑ‖ ≤ ‖Δu*‖ + ℓ ‖Δe‖^{1/2}    (Hölderian)
//! ```
//!
//! The moduli are fitted: for each `κ` on a log grid the smallest admissible
//! `ℓ` is the largest per-sample excess, and `κ̂` is the largest `κ` whose
//! fitted `ℓ` stays below a cap.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::equilibrium::{solve_equilibrium, EquilibriumResult, SolverSettings};
use crate::error::{Error, Result};
use crate::game::{ControlProfile, GameSpec, Perturbation, PlayerShift, TiltVector};
use crate::mesh::GridFunction;

pub const THREADS_ENV: &str = "NASHPDE_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessSettings {
    pub samples: usize,
    pub radius_tilt: f64,
    pub radius_param: f64,
    pub seed: u64,
    /// Upper limit on the fitted `ℓ`; without it any `κ` passes once `Δe ≠ 0`.
    pub ell_max: f64,
    /// Candidate `κ` range, relative to the smallest `ζ` floor.
    pub kappa_range: (f64, f64),
    pub kappa_points: usize,
    pub bisection_steps: usize,
    /// Largest tolerated fraction of dropped (non-converged) samples.
    pub max_drop_fraction: f64,
    pub solver: SolverSettings,
    /// Worker threads; `None` reads `NASHPDE_THREADS`, then uses all cores.
    pub threads: Option<usize>,
}

impl Default for HarnessSettings {
    fn default() -> Self {
        Self {
            samples: 50,
            radius_tilt: 1e-2,
            radius_param: 1e-2,
            seed: 7,
            ell_max: 10.0,
            kappa_range: (1e-4, 1e2),
            kappa_points: 61,
            bisection_steps: 40,
            max_drop_fraction: 0.1,
            solver: SolverSettings {
                residual_tolerance: 1e-11,
                ..SolverSettings::default()
            },
            threads: None,
        }
    }
}

impl HarnessSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSettings(msg));
        if !(self.radius_tilt >= 0.0 && self.radius_tilt.is_finite()) {
            return bad(format!("radius_tilt must be non-negative, got {}", self.radius_tilt));
        }
        if !(self.radius_param >= 0.0 && self.radius_param.is_finite()) {
            return bad(format!("radius_param must be non-negative, got {}", self.radius_param));
        }
        if self.radius_tilt == 0.0 && self.radius_param == 0.0 && self.samples > 0 {
            return bad("at least one radius must be positive".into());
        }
        if !(self.ell_max > 0.0) {
            return bad(format!("ell_max must be positive, got {}", self.ell_max));
        }
        let (lo, hi) = self.kappa_range;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) || self.kappa_points < 2 {
            return bad("kappa grid needs 0 < lo < hi and at least two points".into());
        }
        if !(0.0..=1.0).contains(&self.max_drop_fraction) {
            return bad("max_drop_fraction must lie in [0, 1]".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be positive".into());
        }
        self.solver.validate()
    }
}

/// Reads `NASHPDE_THREADS`; `Ok(None)` when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

#[derive(Debug, Clone)]
pub struct PerturbationSample {
    pub index: usize,
    pub t1: TiltVector,
    pub t2: TiltVector,
    pub e1: Perturbation,
    pub e2: Perturbation,
    pub sol1: EquilibriumResult,
    pub sol2: EquilibriumResult,
    pub d_u: f64,
    pub d_tilt: f64,
    pub d_param: f64,
    /// `‖Δu* − 2κ̂ Δϑ‖`.
    pub lip_lhs: f64,
    /// `‖Δu*‖ + ℓ̂ d_param`.
    pub lip_rhs: f64,
    /// `‖Δu*‖ + ℓ̂ d_param^{1/2}`.
    pub holder_rhs: f64,
}

impl PerturbationSample {
    fn delta_tilt(&self) -> TiltVector {
        self.t1.sub(&self.t2)
    }

    fn delta_u(&self) -> ControlProfile {
        self.sol1.u_bar.sub(&self.sol2.u_bar)
    }

    /// `‖Δu* − 2κ Δϑ‖`.
    pub fn lhs(&self, kappa: f64) -> f64 {
        self.delta_tilt().axpy(-2.0 * kappa, &self.delta_u()).norm()
    }

    pub fn lipschitz_ratio(&self) -> f64 {
        ratio(self.d_u, self.d_tilt + self.d_param)
    }

    pub fn holder_ratio(&self) -> f64 {
        ratio(self.d_u, self.d_tilt + self.d_param.sqrt())
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else if a == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn pass_slack(rhs: f64) -> f64 {
    1e-9 * (1.0 + rhs)
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub samples: Vec<PerturbationSample>,
    pub requested: usize,
    pub dropped: usize,
    pub kappa_hat: f64,
    pub ell_hat: f64,
    pub lip_pass_rate: f64,
    pub holder_pass_rate: f64,
    /// Largest `lhs − rhs` over the samples (non-positive when all pass).
    pub worst_lip_violation: f64,
    pub worst_holder_violation: f64,
    pub max_lipschitz_ratio: f64,
    pub max_holder_ratio: f64,
    /// Lipschitz pass with `d_param ≤ 1` implied a Hölder pass on every sample.
    pub holder_dominance: bool,
    pub radius_tilt: f64,
    pub radius_param: f64,
    pub seed: u64,
}

struct Draw {
    t1: TiltVector,
    t2: TiltVector,
    e1: Perturbation,
    e2: Perturbation,
}

fn uniform_field(spec: &GameSpec, rng: &mut ChaCha8Rng) -> GridFunction {
    GridFunction::from_fn(spec.grid(), |_| rng.random_range(-1.0..1.0))
}

fn draw_tilt(spec: &GameSpec, base: &TiltVector, radius: f64, rng: &mut ChaCha8Rng) -> TiltVector {
    let d = ControlProfile::new((0..spec.num_players()).map(|_| uniform_field(spec, rng)).collect());
    let length = radius * rng.random_range(0.0..1.0);
    let norm = d.norm();
    if radius == 0.0 || norm == 0.0 {
        return base.clone();
    }
    base.axpy(length / norm, &d)
}

fn draw_param(spec: &GameSpec, base: &Perturbation, radius: f64, rng: &mut ChaCha8Rng) -> Result<Perturbation> {
    let e_y = uniform_field(spec, rng);
    let players = (0..spec.num_players())
        .map(|_| PlayerShift {
            e_j: uniform_field(spec, rng),
            e_alpha: uniform_field(spec, rng),
            e_beta: uniform_field(spec, rng),
        })
        .collect();
    let length = radius * rng.random_range(0.0..1.0);
    if radius == 0.0 {
        return Ok(base.clone());
    }
    let mut dir = Perturbation::new_unchecked(e_y, players, base.sigma());
    let norm = dir.norm();
    if norm == 0.0 {
        return Ok(base.clone());
    }
    dir = dir.scaled(length / norm);
    // shrink only the bound shifts until the perturbed boxes keep the σ gap
    for _ in 0..60 {
        let candidate = base.combine(&dir, 1.0);
        if candidate.validate(spec).is_ok() {
            return Ok(candidate);
        }
        for s in &mut dir.players {
            s.e_alpha = s.e_alpha.scale(0.5);
            s.e_beta = s.e_beta.scale(0.5);
        }
    }
    Err(Error::InfeasiblePerturbation(
        "could not repair a sampled bound shift against sigma".into(),
    ))
}

fn draw_all(
    spec: &GameSpec,
    base_e: &Perturbation,
    base_t: &TiltVector,
    settings: &HarnessSettings,
) -> Result<Vec<Draw>> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    (0..settings.samples)
        .map(|_| {
            let t1 = draw_tilt(spec, base_t, settings.radius_tilt, &mut rng);
            let t2 = draw_tilt(spec, base_t, settings.radius_tilt, &mut rng);
            let e1 = draw_param(spec, base_e, settings.radius_param, &mut rng)?;
            let e2 = draw_param(spec, base_e, settings.radius_param, &mut rng)?;
            Ok(Draw { t1, t2, e1, e2 })
        })
        .collect()
}

/// Solves both problems of a pair from `warm` and fills the distances; the
/// inequality columns are left at zero until the moduli are fitted.
pub fn solve_pair(
    spec: &GameSpec,
    index: usize,
    (t1, e1): (&TiltVector, &Perturbation),
    (t2, e2): (&TiltVector, &Perturbation),
    solver: &SolverSettings,
    warm: Option<&ControlProfile>,
) -> Result<PerturbationSample> {
    let sol1 = solve_equilibrium(spec, e1, t1, solver, warm)?;
    let sol2 = solve_equilibrium(spec, e2, t2, solver, warm)?;
    if !sol1.converged || !sol2.converged {
        return Err(Error::NotConverged {
            residual: sol1.residual.max(sol2.residual),
        });
    }
    Ok(PerturbationSample {
        index,
        d_u: sol1.u_bar.sub(&sol2.u_bar).norm(),
        d_tilt: t1.sub(t2).norm(),
        d_param: e1.distance(e2),
        t1: t1.clone(),
        t2: t2.clone(),
        e1: e1.clone(),
        e2: e2.clone(),
        sol1,
        sol2,
        lip_lhs: 0.0,
        lip_rhs: 0.0,
        holder_rhs: 0.0,
    })
}

/// Smallest `ℓ` making every sample pass at `κ`; `None` when a sample with
/// `d_param = 0` fails (no `ℓ` helps) or the fit exceeds `ell_max`.
fn fitted_ell(samples: &[PerturbationSample], kappa: f64, ell_max: f64) -> Option<f64> {
    let mut ell: f64 = 0.0;
    for s in samples {
        let excess = s.lhs(kappa) - s.d_tilt;
        if excess <= pass_slack(s.d_tilt) {
            continue;
        }
        if s.d_param == 0.0 {
            return None;
        }
        ell = ell.max(excess / s.d_param);
    }
    (ell <= ell_max).then_some(ell)
}

/// Largest `κ` on the grid (refined by bisection) with an admissible `ℓ`.
/// The admissible set is an interval containing zero since `κ ↦ lhs(κ)` is
/// convex and `lhs(0) = d_tilt`.
pub fn estimate_moduli(samples: &[PerturbationSample], mu: f64, settings: &HarnessSettings) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let (lo, hi) = (settings.kappa_range.0 * mu, settings.kappa_range.1 * mu);
    let n = settings.kappa_points;
    let grid: Vec<f64> = (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect();
    let mut best: Option<(f64, f64)> = None;
    let mut fail = None;
    for &kappa in &grid {
        match fitted_ell(samples, kappa, settings.ell_max) {
            Some(ell) => best = Some((kappa, ell)),
            None => {
                fail = Some(kappa);
                break;
            }
        }
    }
    let Some((mut kappa, mut ell)) = best else {
        return (0.0, 0.0);
    };
    if let Some(mut upper) = fail {
        for _ in 0..settings.bisection_steps {
            let mid = 0.5 * (kappa + upper);
            match fitted_ell(samples, mid, settings.ell_max) {
                Some(l) => {
                    kappa = mid;
                    ell = l;
                }
                None => upper = mid,
            }
        }
    }
    (kappa, ell)
}

pub fn run_harness(
    spec: &GameSpec,
    base_e: &Perturbation,
    base_t: &TiltVector,
    settings: &HarnessSettings,
) -> Result<StabilityReport> {
    settings.validate()?;
    let base = solve_equilibrium(spec, base_e, base_t, &settings.solver, None)?;
    if !base.converged {
        return Err(Error::NotConverged {
            residual: base.residual,
        });
    }
    let draws = draw_all(spec, base_e, base_t, settings)?;
    // the base step size serves the whole neighborhood
    let solver = SolverSettings {
        tau: settings.solver.tau.or(Some(base.tau)),
        ..settings.solver.clone()
    };
    let threads = match settings.threads {
        Some(n) => Some(n),
        None => threads_from_env()?,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Harness(format!("thread pool: {e}")))?;
    let solved: Vec<Option<PerturbationSample>> = pool.install(|| {
        draws
            .par_iter()
            .enumerate()
            .map(|(i, d)| solve_pair(spec, i, (&d.t1, &d.e1), (&d.t2, &d.e2), &solver, Some(&base.u_bar)).ok())
            .collect()
    });
    let dropped = solved.iter().filter(|s| s.is_none()).count();
    if dropped as f64 > settings.max_drop_fraction * settings.samples as f64 {
        return Err(Error::Harness(format!(
            "{dropped} of {} sample solves failed to converge",
            settings.samples
        )));
    }
    let mut samples: Vec<PerturbationSample> = solved.into_iter().flatten().collect();
    let (kappa_hat, ell_hat) = estimate_moduli(&samples, spec.min_zeta_floor(), settings);

    let mut lip_pass = 0;
    let mut holder_pass = 0;
    let mut worst_lip = f64::NEG_INFINITY;
    let mut worst_holder = f64::NEG_INFINITY;
    let mut holder_dominance = true;
    for s in &mut samples {
        s.lip_lhs = s.lhs(kappa_hat);
        s.lip_rhs = s.d_tilt + ell_hat * s.d_param;
        s.holder_rhs = s.d_tilt + ell_hat * s.d_param.sqrt();
        let lip_ok = s.lip_lhs <= s.lip_rhs + pass_slack(s.lip_rhs);
        let holder_ok = s.lip_lhs <= s.holder_rhs + pass_slack(s.holder_rhs);
        lip_pass += usize::from(lip_ok);
        holder_pass += usize::from(holder_ok);
        worst_lip = worst_lip.max(s.lip_lhs - s.lip_rhs);
        worst_holder = worst_holder.max(s.lip_lhs - s.holder_rhs);
        if lip_ok && s.d_param <= 1.0 {
            let rhs = s.d_tilt + ell_hat * s.d_param.sqrt().max(1.0) * s.d_param.sqrt();
            holder_dominance &= s.lip_lhs <= rhs + pass_slack(rhs);
        }
    }
    let rate = |n: usize| {
        if samples.is_empty() {
            1.0
        } else {
            n as f64 / samples.len() as f64
        }
    };
    Ok(StabilityReport {
        lip_pass_rate: rate(lip_pass),
        holder_pass_rate: rate(holder_pass),
        worst_lip_violation: if samples.is_empty() { 0.0 } else { worst_lip },
        worst_holder_violation: if samples.is_empty() { 0.0 } else { worst_holder },
        max_lipschitz_ratio: samples.iter().map(|s| s.lipschitz_ratio()).fold(0.0, f64::max),
        max_holder_ratio: samples.iter().map(|s| s.holder_ratio()).fold(0.0, f64::max),
        holder_dominance,
        kappa_hat,
        ell_hat,
        samples,
        requested: settings.samples,
        dropped,
        radius_tilt: settings.radius_tilt,
        radius_param: settings.radius_param,
        seed: settings.seed,
    })
}

pub const CSV_HEADER: &str = "index,d_tilt,d_param,d_u,lip_lhs,lip_rhs,holder_rhs";

/// One row per sample and a final `summary` row holding
/// `kappa_hat, ell_hat, lip_pass_rate, holder_pass_rate, dropped, requested`.
pub fn write_report<W: Write>(report: &StabilityReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for s in &report.samples {
        writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            s.index, s.d_tilt, s.d_param, s.d_u, s.lip_lhs, s.lip_rhs, s.holder_rhs
        )?;
    }
    writeln!(
        out,
        "summary,{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
        report.kappa_hat,
        report.ell_hat,
        report.lip_pass_rate,
        report.holder_pass_rate,
        report.dropped,
        report.requested
    )?;
    Ok(())
}

pub fn export_report(report: &StabilityReport, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_report(report, &mut out)?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::tests::simple_game;

    fn settings(samples: usize, radius_tilt: f64, radius_param: f64) -> HarnessSettings {
        HarnessSettings {
            samples,
            radius_tilt,
            radius_param,
            seed: 7,
            threads: Some(2),
            ..HarnessSettings::default()
        }
    }

    fn closed_form(zeta: f64) -> (GameSpec, Perturbation, TiltVector) {
        let spec = simple_game(33, "0", vec![("0", zeta)]);
        let t = ControlProfile::new(vec![GridFunction::from_fn(spec.grid(), |x| {
            1.5 * zeta * (std::f64::consts::PI * x[0]).sin()
        })]);
        let e = Perturbation::zero(&spec);
        (spec, e, t)
    }

    fn lq() -> (GameSpec, Perturbation, TiltVector) {
        let mut spec = simple_game(33, "0", vec![("0.5*(y - yd)^2", 0.5), ("0.5*(y + yd)^2", 1.0)]);
        for p in spec.players_mut() {
            p.yd = GridFunction::from_fn(&p.yd.grid().clone(), |x| 2.0 * (2.0 * x[0]).sin());
        }
        let e = Perturbation::zero(&spec);
        let t = ControlProfile::zeros(&spec);
        (spec, e, t)
    }

    #[test]
    fn identical_problems_give_identical_solutions() {
        let (spec, e, t) = lq();
        let solver = HarnessSettings::default().solver;
        let s = solve_pair(&spec, 0, (&t, &e), (&t, &e), &solver, None).unwrap();
        assert!(s.d_u <= 2.0 * solver.residual_tolerance / spec.min_zeta_floor());
        assert_eq!(s.d_tilt, 0.0);
        assert_eq!(s.d_param, 0.0);
    }

    #[test]
    fn pure_tilt_matches_closed_form_map() {
        let zeta = 2.0;
        let (spec, e, t) = closed_form(zeta);
        let report = run_harness(&spec, &e, &t, &settings(20, 0.5, 0.0)).unwrap();
        assert_eq!(report.dropped, 0);
        for s in &report.samples {
            let expected = |tilt: &TiltVector| tilt.get(0).map(|v| (v / zeta).clamp(-1.0, 1.0));
            assert!((s.sol1.u_bar.get(0) - &expected(&s.t1)).max_abs() <= 1e-8);
            assert!((s.sol2.u_bar.get(0) - &expected(&s.t2)).max_abs() <= 1e-8);
            assert!(s.d_u <= s.d_tilt / zeta + 1e-10);
            // the closed-form map satisfies the inequality with κ = ζ/2, ℓ = 0
            assert!(s.lhs(zeta / 2.0) <= s.d_tilt + 1e-10);
        }
        assert_eq!(report.lip_pass_rate, 1.0);
        assert!(report.kappa_hat >= zeta / 2.0 - 1e-3);
        assert_eq!(report.ell_hat, 0.0);
    }

    #[test]
    fn certified_lq_passes_both_inequalities() {
        let (spec, e, t) = lq();
        let report = run_harness(&spec, &e, &t, &settings(20, 1e-2, 1e-2)).unwrap();
        assert_eq!(report.dropped, 0);
        assert_eq!(report.samples.len(), 20);
        assert_eq!(report.lip_pass_rate, 1.0);
        assert_eq!(report.holder_pass_rate, 1.0);
        assert!(report.kappa_hat > 0.0);
        assert!(report.holder_dominance);
        assert!(report.worst_lip_violation <= 1e-9);
    }

    #[test]
    fn sampled_parameters_respect_radius_and_margin() {
        let (spec, e, t) = lq();
        let s = settings(30, 1e-2, 0.5);
        let draws = draw_all(&spec, &e, &t, &s).unwrap();
        for d in &draws {
            assert!(e.distance(&d.e1) <= 0.5 + 1e-12);
            assert!(t.sub(&d.t1).norm() <= 1e-2 + 1e-12);
            d.e1.validate(&spec).unwrap();
            d.e2.validate(&spec).unwrap();
        }
    }

    #[test]
    fn bound_shifts_are_repaired() {
        let spec = simple_game(9, "0", vec![("0", 1.0)]);
        let e = Perturbation::zero(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = draw_param(&spec, &e, 50.0, &mut rng).unwrap();
            p.validate(&spec).unwrap();
        }
    }

    #[test]
    fn halving_radii_keeps_kappa_and_pass_rates() {
        let (spec, e, t) = lq();
        let full = run_harness(&spec, &e, &t, &settings(10, 1e-2, 1e-2)).unwrap();
        let mut previous = full.lip_pass_rate;
        for factor in [0.5, 0.25] {
            let r = run_harness(&spec, &e, &t, &settings(10, 1e-2 * factor, 1e-2 * factor)).unwrap();
            assert!(r.lip_pass_rate >= previous);
            assert!(r.holder_pass_rate >= full.holder_pass_rate);
            assert!(r.kappa_hat <= 2.0 * full.kappa_hat && r.kappa_hat >= 0.5 * full.kappa_hat);
            previous = r.lip_pass_rate;
        }
    }

    #[test]
    fn csv_layout_and_determinism() {
        let (spec, e, t) = lq();
        let run = || {
            let report = run_harness(&spec, &e, &t, &settings(10, 1e-2, 1e-2)).unwrap();
            let mut buf = Vec::new();
            write_report(&report, &mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = run();
        assert_eq!(a.lines().count(), 12);
        assert_eq!(a.lines().next(), Some(CSV_HEADER));
        assert!(a.lines().last().unwrap().starts_with("summary,"));
        assert_eq!(a, run());
        let single = run_harness(
            &spec,
            &e,
            &t,
            &HarnessSettings {
                threads: Some(1),
                ..settings(10, 1e-2, 1e-2)
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        write_report(&single, &mut buf).unwrap();
        assert_eq!(a, String::from_utf8(buf).unwrap());
    }

    #[test]
    fn empty_report_has_header_and_summary() {
        let (spec, e, t) = lq();
        let report = run_harness(&spec, &e, &t, &settings(0, 1e-2, 1e-2)).unwrap();
        let mut buf = Vec::new();
        write_report(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        export_report(&report, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
        assert!(export_report(&report, &dir.path().join("missing").join("r.csv")).is_err());
    }

    #[test]
    fn excessive_drops_fail_the_run() {
        let (spec, e, t) = lq();
        let mut s = settings(5, 1e-2, 1e-2);
        s.solver.max_outer_iters = 1;
        s.solver.tau = Some(1e-3);
        assert!(matches!(
            run_harness(&spec, &e, &t, &s),
            Err(Error::NotConverged { .. }) | Err(Error::Harness(_))
        ));
    }

    #[test]
    fn moduli_fit_handles_parameter_free_samples() {
        let (spec, e, t) = closed_form(1.0);
        let solver = HarnessSettings::default().solver;
        let t2 = t.scale(0.99);
        let s = solve_pair(&spec, 0, (&t, &e), (&t2, &e), &solver, None).unwrap();
        let (kappa, ell) = estimate_moduli(std::slice::from_ref(&s), 1.0, &HarnessSettings::default());
        assert!((kappa - 1.0).abs() <= 1e-6, "{kappa}");
        assert_eq!(ell, 0.0);
        assert_eq!(estimate_moduli(&[], 1.0, &HarnessSettings::default()), (0.0, 0.0));
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(HarnessSettings {
            radius_tilt: -1.0,
            ..HarnessSettings::default()
        }
        .validate()
        .is_err());
        assert!(HarnessSettings {
            threads: Some(0),
            ..HarnessSettings::default()
        }
        .validate()
        .is_err());
        assert!(HarnessSettings {
            radius_tilt: 0.0,
            radius_param: 0.0,
            ..HarnessSettings::default()
        }
        .validate()
        .is_err());
    }
}
