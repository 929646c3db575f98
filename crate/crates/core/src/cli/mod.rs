//! Command-line driver: `check`, `equilibrium`, `certify` and `perturb`.
//!
//! Exit codes: 0 success, 1 analysis failure, 2 configuration error.

pub mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calculus::{adjoint_identity_error, gradient_fd_error, hessian_fd_error, pseudo_gradient, EquilibriumPoint};
use crate::equilibrium::{check_variational_equilibrium, solve_equilibrium, EquilibriumResult, Method};
use crate::error::Error;
use crate::game::ControlProfile;
use crate::mesh::{l2_norm, GridFunction};
use crate::perturb::{export_report, run_harness};
use crate::stability::{certify_with, verify_local_nash, EigenMethod};
use config::Instance;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Tolerances of `check`.
pub const GRADIENT_TOL: f64 = 1e-6;
pub const HESSIAN_TOL: f64 = 1e-5;
pub const ADJOINT_TOL: f64 = 1e-10;
const FD_STEP: f64 = 1e-5;
const CHECK_SEED: u64 = 2024;
const CONE_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(
    name = "nashpde",
    version,
    about = "Nash equilibria of PDE-constrained games: solve, certify, stress-test"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference and adjoint checks of the derivative formulas.
    Check { config: PathBuf },
    /// Solve for the variational equilibrium.
    Equilibrium {
        config: PathBuf,
        /// projected-fixed-point or gauss-seidel-best-response
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long = "max-iters")]
        max_iters: Option<usize>,
        /// Write the controls as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the residual history as CSV (iter,residual).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Solve, then certify full stability on the critical subspace.
    Certify {
        config: PathBuf,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long = "eps-act")]
        eps_act: Option<f64>,
        /// dense, lanczos or auto
        #[arg(long = "eigen-method")]
        eigen_method: Option<String>,
        /// Write the eigenvector witness as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the perturbation harness.
    Perturb {
        config: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long = "radius-tilt")]
        radius_tilt: Option<f64>,
        #[arg(long = "radius-param")]
        radius_param: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the per-sample CSV report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Analysis(String),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Analysis(format!("output error: {e}"))
    }
}

fn analysis(e: Error) -> Failure {
    match e {
        Error::Config(msg) => Failure::Config(msg),
        Error::InvalidSettings(msg) => Failure::Config(format!("invalid settings: {msg}")),
        other => Failure::Analysis(other.to_string()),
    }
}

fn config_failure(e: Error) -> Failure {
    match e {
        Error::Config(msg) => Failure::Config(msg),
        other => Failure::Config(other.to_string()),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, out, err),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            code
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let outcome = match cli.command {
        Command::Check { config } => cmd_check(&config, out),
        Command::Equilibrium {
            config,
            method,
            tol,
            max_iters,
            out: path,
            history,
        } => cmd_equilibrium(
            &config,
            method,
            tol,
            max_iters,
            path.as_deref(),
            history.as_deref(),
            out,
        ),
        Command::Certify {
            config,
            delta,
            eps_act,
            eigen_method,
            out: path,
        } => cmd_certify(&config, delta, eps_act, eigen_method, path.as_deref(), out),
        Command::Perturb {
            config,
            samples,
            radius_tilt,
            radius_param,
            seed,
            out: path,
        } => cmd_perturb(&config, samples, radius_tilt, radius_param, seed, path.as_deref(), out),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            let _ = writeln!(err, "configuration error: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Analysis(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_FAILURE
        }
    }
}

fn load(path: &Path, out: &mut dyn Write) -> Result<Instance, Failure> {
    let inst = config::load(path).map_err(config_failure)?;
    writeln!(out, "nashpde {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(out, "config sha256 {}", inst.hash)?;
    writeln!(out, "grid {}", inst.spec.grid())?;
    writeln!(out, "players {}", inst.spec.num_players())?;
    Ok(inst)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

fn uniform_between(rng: &mut ChaCha8Rng, lo: &GridFunction, hi: &GridFunction) -> GridFunction {
    let values = lo
        .values()
        .iter()
        .zip(hi.values())
        .map(|(&a, &b)| a + rng.random_range(0.0..1.0) * (b - a))
        .collect();
    GridFunction::from_values(lo.grid(), values).expect("finite bounds")
}

/// Random combination of the lowest sine modes on the domain. Smooth
/// directions keep the directional derivatives at the scale of the gradient,
/// unlike node-wise noise.
fn smooth_direction(rng: &mut ChaCha8Rng, spec: &crate::game::GameSpec) -> GridFunction {
    let grid = spec.grid();
    let modes = if grid.dim() == 1 {
        vec![(1, 1), (2, 1), (3, 1), (4, 1)]
    } else {
        vec![(1, 1), (2, 1), (1, 2), (2, 2), (3, 1), (1, 3)]
    };
    let coeffs: Vec<f64> = modes.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let ext = grid.extents().to_vec();
    GridFunction::from_fn(grid, |x| {
        let s: Vec<f64> = (0..grid.dim())
            .map(|d| (x[d] - ext[d].0) / (ext[d].1 - ext[d].0))
            .collect();
        modes
            .iter()
            .zip(&coeffs)
            .map(|(&(a, b), c)| {
                let sx = (a as f64 * std::f64::consts::PI * s[0]).sin();
                let sy = if grid.dim() == 2 {
                    (b as f64 * std::f64::consts::PI * s[1]).sin()
                } else {
                    1.0
                };
                c * sx * sy
            })
            .sum()
    })
}

fn cmd_check(path: &Path, out: &mut dyn Write) -> Result<i32, Failure> {
    let mut inst = load(path, out)?;
    // difference quotients amplify state-solve errors by 1/ε
    let eq = inst.spec.state_equation_mut();
    eq.newton.abs_tolerance = 1e-14;
    eq.linear.rel_tolerance = 1e-14;
    let spec = &inst.spec;
    let e = &inst.perturbation;
    let t = &inst.tilt;
    let mut rng = ChaCha8Rng::seed_from_u64(CHECK_SEED);
    // a generic admissible point, away from any equilibrium
    let u = ControlProfile::new(
        (0..spec.num_players())
            .map(|k| uniform_between(&mut rng, &spec.lower_bound(k, e), &spec.upper_bound(k, e)))
            .collect(),
    );
    let m = spec.num_players();
    let mut directions = || -> Vec<GridFunction> { (0..10).map(|_| smooth_direction(&mut rng, spec)).collect() };
    let mut all_ok = true;
    let pt = EquilibriumPoint::evaluate(spec, &u, e).map_err(analysis)?;
    for k in 0..m {
        let dirs = directions();
        let mut worst: f64 = 0.0;
        for h in &dirs {
            worst = worst.max(gradient_fd_error(spec, &u, e, t, k, h, FD_STEP).map_err(analysis)?);
        }
        let ok = worst <= GRADIENT_TOL;
        all_ok &= ok;
        writeln!(
            out,
            "gradient player {k}: max relative error {worst:.3e} (tol {GRADIENT_TOL:.0e}) {}",
            verdict(ok)
        )?;
    }
    for k in 0..m {
        for j in 0..m {
            let dirs = directions();
            let mut worst: f64 = 0.0;
            for pair in dirs.chunks(2).take(3) {
                worst = worst.max(hessian_fd_error(spec, &u, e, k, j, &pair[0], &pair[1], FD_STEP).map_err(analysis)?);
            }
            let ok = worst <= HESSIAN_TOL;
            all_ok &= ok;
            writeln!(
                out,
                "hessian block ({k},{j}): max relative error {worst:.3e} (tol {HESSIAN_TOL:.0e}) {}",
                verdict(ok)
            )?;
        }
    }
    for k in 0..m {
        let dirs = directions();
        let mut worst: f64 = 0.0;
        for v in dirs.iter().take(3) {
            worst = worst.max(adjoint_identity_error(spec, &pt, k, v).map_err(analysis)?);
        }
        let ok = worst <= ADJOINT_TOL;
        all_ok &= ok;
        writeln!(
            out,
            "adjoint identity player {k}: max relative error {worst:.3e} (tol {ADJOINT_TOL:.0e}) {}",
            verdict(ok)
        )?;
    }
    writeln!(out, "check {}", if all_ok { "passed" } else { "failed" })?;
    Ok(if all_ok { EXIT_OK } else { EXIT_FAILURE })
}

fn solve(inst: &Instance, out: &mut dyn Write) -> Result<EquilibriumResult, Failure> {
    let r = solve_equilibrium(&inst.spec, &inst.perturbation, &inst.tilt, &inst.solver, None).map_err(analysis)?;
    writeln!(out, "method {}", inst.solver.method)?;
    writeln!(out, "step size {:.6e}", r.tau)?;
    writeln!(out, "iterations {}", r.iterations)?;
    writeln!(out, "residual {:.6e}", r.residual)?;
    writeln!(out, "converged {}", if r.converged { "yes" } else { "no" })?;
    Ok(r)
}

fn write_profile_csv(path: &Path, columns: &[(String, &GridFunction)]) -> Result<(), Failure> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Failure::Analysis(format!("{}: {e}", path.display())))?);
    let grid = columns[0].1.grid();
    let mut header: Vec<String> = (1..=grid.dim()).map(|d| format!("x{d}")).collect();
    header.extend(columns.iter().map(|(name, _)| name.clone()));
    writeln!(f, "{}", header.join(","))?;
    for i in 0..grid.num_interior() {
        let x = grid.coords(i);
        let mut row: Vec<String> = x[..grid.dim()].iter().map(|v| format!("{v:.17e}")).collect();
        row.extend(columns.iter().map(|(_, g)| format!("{:.17e}", g.values()[i])));
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

fn write_history_csv(path: &Path, history: &[f64]) -> Result<(), Failure> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Failure::Analysis(format!("{}: {e}", path.display())))?);
    writeln!(f, "iter,residual")?;
    for (i, r) in history.iter().enumerate() {
        writeln!(f, "{i},{r:.17e}")?;
    }
    f.flush()?;
    Ok(())
}

fn cmd_equilibrium(
    path: &Path,
    method: Option<String>,
    tol: Option<f64>,
    max_iters: Option<usize>,
    csv: Option<&Path>,
    history: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32, Failure> {
    let mut inst = load(path, out)?;
    if let Some(m) = method {
        inst.solver.method = m
            .parse::<Method>()
            .map_err(|e| Failure::Config(format!("--method: {e}")))?;
    }
    if let Some(t) = tol {
        inst.solver.residual_tolerance = t;
    }
    if let Some(n) = max_iters {
        inst.solver.max_outer_iters = n;
    }
    inst.solver.validate().map_err(config_failure)?;
    let r = solve(&inst, out)?;
    let spec = &inst.spec;
    let grad = pseudo_gradient(spec, &r.point);
    for k in 0..spec.num_players() {
        let norm = l2_norm(&(grad.get(k) - inst.tilt.get(k)));
        writeln!(out, "player {k}: tilted gradient norm {norm:.6e}")?;
    }
    if spec.num_players() > 1 {
        let mut diff: f64 = 0.0;
        for k in 1..spec.num_players() {
            diff = diff.max((r.u_bar.get(0) - r.u_bar.get(k)).max_abs());
        }
        writeln!(out, "max player difference {diff:.6e}")?;
    }
    let cone = check_variational_equilibrium(spec, &r, CONE_TOL);
    for (k, p) in cone.players.iter().enumerate() {
        writeln!(
            out,
            "normal cone player {k}: lower {} upper {} interior {} worst violation {:.3e} {}",
            p.at_lower,
            p.at_upper,
            p.interior,
            p.worst_violation,
            verdict(p.passed)
        )?;
    }
    writeln!(
        out,
        "normal cone check {}",
        if cone.passed() { "passed" } else { "failed" }
    )?;
    if let Some(csv) = csv {
        let columns: Vec<(String, &GridFunction)> =
            r.u_bar.iter().enumerate().map(|(k, g)| (format!("u{k}"), g)).collect();
        write_profile_csv(csv, &columns)?;
        writeln!(out, "controls written to {}", csv.display())?;
    }
    if let Some(path) = history {
        write_history_csv(path, &r.history)?;
        writeln!(out, "residual history written to {}", path.display())?;
    }
    if !r.converged {
        return Err(Failure::Analysis(format!(
            "equilibrium solve did not converge in {} iterations (residual {:.6e})",
            r.iterations, r.residual
        )));
    }
    Ok(EXIT_OK)
}

fn cmd_certify(
    path: &Path,
    delta: Option<f64>,
    eps_act: Option<f64>,
    eigen_method: Option<String>,
    csv: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32, Failure> {
    let mut inst = load(path, out)?;
    if let Some(d) = delta {
        inst.certify.delta = d;
    }
    if eps_act.is_some() {
        inst.certify.eps_act = eps_act;
    }
    if let Some(m) = eigen_method {
        inst.certify.method = m
            .parse::<EigenMethod>()
            .map_err(|e| Failure::Config(format!("--eigen-method: {e}")))?;
    }
    config::validate_certify(&inst.certify).map_err(config_failure)?;
    let r = solve(&inst, out)?;
    if !r.converged {
        return Err(Failure::Analysis(format!(
            "equilibrium solve did not converge (residual {:.6e})",
            r.residual
        )));
    }
    let spec = &inst.spec;
    let cert = certify_with(spec, &r, &inst.certify).map_err(analysis)?;
    writeln!(out, "eps_act {:.6e}", cert.mask.eps_act())?;
    for k in 0..spec.num_players() {
        writeln!(
            out,
            "player {k}: free {} fixed {}",
            cert.mask.free_count(k),
            cert.mask.fixed_count(k)
        )?;
    }
    writeln!(out, "free unknowns {}", cert.mask.total_free())?;
    if cert.mask.total_free() == 0 {
        writeln!(out, "free set empty: positive definiteness holds vacuously")?;
        writeln!(out, "lambda_min inf")?;
    } else {
        writeln!(out, "eigen method {}", cert.method)?;
        writeln!(out, "lambda_min {:.10e}", cert.lambda_min)?;
        writeln!(out, "witness norm {:.6}", cert.eigvector.norm())?;
    }
    if let Some(d) = &cert.diagnostic {
        writeln!(out, "note: {d}")?;
    }
    writeln!(out, "delta {:.3e}", cert.delta)?;
    writeln!(out, "verdict {}", cert.verdict)?;
    if let Some(csv) = csv {
        let columns: Vec<(String, &GridFunction)> = cert
            .eigvector
            .iter()
            .enumerate()
            .map(|(k, g)| (format!("v{k}"), g))
            .collect();
        write_profile_csv(csv, &columns)?;
        writeln!(out, "witness written to {}", csv.display())?;
    }
    if !cert.is_fully_stable() {
        return Ok(EXIT_FAILURE);
    }
    let ln = inst.local_nash;
    let report = verify_local_nash(spec, &r, &cert, ln.samples, ln.radius, ln.seed).map_err(analysis)?;
    for (k, v) in report.violations.iter().enumerate() {
        writeln!(
            out,
            "local nash player {k}: {} samples radius {:.1e} violations {v} min cost change {:.3e}",
            ln.samples, ln.radius, report.min_gain[k]
        )?;
    }
    Ok(if report.total_violations() == 0 {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}

fn cmd_perturb(
    path: &Path,
    samples: Option<usize>,
    radius_tilt: Option<f64>,
    radius_param: Option<f64>,
    seed: Option<u64>,
    csv: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32, Failure> {
    let mut inst = load(path, out)?;
    let h = &mut inst.harness;
    if let Some(n) = samples {
        h.samples = n;
    }
    if let Some(r) = radius_tilt {
        h.radius_tilt = r;
    }
    if let Some(r) = radius_param {
        h.radius_param = r;
    }
    if let Some(s) = seed {
        h.seed = s;
    }
    h.validate().map_err(config_failure)?;
    crate::perturb::threads_from_env().map_err(config_failure)?;
    writeln!(out, "seed {}", h.seed)?;
    writeln!(
        out,
        "samples {} radius_tilt {:.3e} radius_param {:.3e}",
        h.samples, h.radius_tilt, h.radius_param
    )?;
    let report = run_harness(&inst.spec, &inst.perturbation, &inst.tilt, &inst.harness).map_err(analysis)?;
    writeln!(out, "solved {} dropped {}", report.samples.len(), report.dropped)?;
    writeln!(out, "kappa_hat {:.10e}", report.kappa_hat)?;
    writeln!(out, "ell_hat {:.10e}", report.ell_hat)?;
    writeln!(out, "lipschitz pass rate {:.4}", report.lip_pass_rate)?;
    writeln!(out, "holder pass rate {:.4}", report.holder_pass_rate)?;
    writeln!(out, "worst lipschitz violation {:.3e}", report.worst_lip_violation)?;
    writeln!(out, "worst holder violation {:.3e}", report.worst_holder_violation)?;
    writeln!(out, "max lipschitz ratio {:.6e}", report.max_lipschitz_ratio)?;
    writeln!(out, "max holder ratio {:.6e}", report.max_holder_ratio)?;
    writeln!(out, "holder dominance {}", verdict(report.holder_dominance))?;
    if let Some(csv) = csv {
        export_report(&report, csv).map_err(analysis)?;
        writeln!(out, "report written to {}", csv.display())?;
    }
    Ok(if report.lip_pass_rate == 1.0 {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}
