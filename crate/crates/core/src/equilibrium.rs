//! Variational Nash equilibria as solutions of the parametric variational
//! inequality `u* ∈ F(u, e) + N(u; 𝒰_ad(e))`.
//!
//! Two solvers are provided: a projected fixed-point (forward-backward)
//! iteration on the whole profile and a Gauss-Seidel best-response sweep in
//! which each player runs projected gradient steps with the others frozen.
//! Both stop on the natural-map residual
//! `‖u − P(u − (F(u, e) − u*))‖`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::calculus::{pseudo_gradient, symmetrized_apply, EquilibriumPoint};
use crate::error::{Error, Result};
use crate::game::{ControlProfile, GameSpec, Perturbation, TiltVector};
use crate::mesh::GridFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ProjectedFixedPoint,
    GaussSeidelBestResponse,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ProjectedFixedPoint => "projected-fixed-point",
            Method::GaussSeidelBestResponse => "gauss-seidel-best-response",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projected-fixed-point" => Ok(Method::ProjectedFixedPoint),
            "gauss-seidel-best-response" => Ok(Method::GaussSeidelBestResponse),
            _ => Err(Error::InvalidSettings(format!(
                "unknown method `{s}` (expected projected-fixed-point or gauss-seidel-best-response)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub method: Method,
    /// Step size; estimated from the operator when `None`.
    pub tau: Option<f64>,
    pub residual_tolerance: f64,
    pub max_outer_iters: usize,
    /// Projected-gradient steps per player and sweep (best response only).
    pub inner_iters: usize,
    /// Anderson acceleration memory for the fixed-point method; 0 disables.
    pub anderson_depth: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            method: Method::ProjectedFixedPoint,
            tau: None,
            residual_tolerance: 1e-9,
            max_outer_iters: 5000,
            inner_iters: 50,
            anderson_depth: 5,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::InvalidSettings(format!("tau must be positive, got {tau}")));
            }
        }
        if !(self.residual_tolerance > 0.0) {
            return Err(Error::InvalidSettings("residual_tolerance must be positive".into()));
        }
        if self.max_outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::InvalidSettings("iteration limits must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub u_bar: ControlProfile,
    pub point: EquilibriumPoint,
    pub tilt: TiltVector,
    pub residual: f64,
    pub iterations: usize,
    /// `û* = ū* − F(ū, ē)`, an element of the normal cone at an equilibrium.
    pub u_hat_star: ControlProfile,
    pub converged: bool,
    pub tau: f64,
    /// Natural-map residual after every outer iteration (entry 0 is the start).
    pub history: Vec<f64>,
}

impl EquilibriumResult {
    /// Evaluates an arbitrary candidate profile as if it were a solver output.
    pub fn at(spec: &GameSpec, e: &Perturbation, t: &TiltVector, u: &ControlProfile, tolerance: f64) -> Result<Self> {
        let pt = EquilibriumPoint::evaluate(spec, u, e)?;
        let f = pseudo_gradient(spec, &pt);
        let residual = natural_residual(spec, e, t, u, &f)?;
        Ok(Self {
            u_bar: u.clone(),
            tilt: t.clone(),
            residual,
            iterations: 0,
            u_hat_star: t.sub(&f),
            converged: residual <= tolerance,
            tau: f64::NAN,
            history: vec![residual],
            point: pt,
        })
    }

    pub fn perturbation(&self) -> &Perturbation {
        &self.point.e
    }
}

fn natural_residual(
    spec: &GameSpec,
    e: &Perturbation,
    t: &TiltVector,
    u: &ControlProfile,
    f: &ControlProfile,
) -> Result<f64> {
    let step = u.sub(&f.sub(t));
    Ok(u.sub(&spec.project_admissible(e, &step)?).norm())
}

/// `‖u − P(u − (F(u, e) − u*))‖`, zero exactly at solutions.
pub fn residual(spec: &GameSpec, e: &Perturbation, t: &TiltVector, u: &ControlProfile) -> Result<f64> {
    let pt = EquilibriumPoint::evaluate(spec, u, e)?;
    natural_residual(spec, e, t, u, &pseudo_gradient(spec, &pt))
}

/// Power-iteration estimate of the spectral radius of `½(F'_u + F'_uᵀ)`.
pub fn estimate_lipschitz(spec: &GameSpec, pt: &EquilibriumPoint, steps: usize) -> Result<f64> {
    let grid = spec.grid();
    let mut v = ControlProfile::new(
        (0..spec.num_players())
            .map(|k| {
                GridFunction::from_fn(grid, |x| {
                    // deterministic, non-symmetric start
                    let s = (x[0] * 0.618_033_988_749_895 + x[1] * 0.414_213_562 + k as f64 * 0.3).fract();
                    0.5 + s
                })
            })
            .collect(),
    );
    let mut estimate = 0.0;
    for _ in 0..steps {
        let norm = v.norm();
        if norm == 0.0 {
            break;
        }
        v = v.scale(1.0 / norm);
        let w = symmetrized_apply(spec, pt, &v)?;
        estimate = w.norm();
        v = w;
    }
    Ok(estimate)
}

/// `0.9 μ / max(L, μ)` with `μ` the smallest control cost and `L` a
/// 20-step power-iteration estimate. This is not scale invariant, so an
/// overly long step is left to the halving safeguard.
fn default_tau(spec: &GameSpec, pt: &EquilibriumPoint) -> Result<f64> {
    let mu = spec.min_zeta_floor();
    let lip = estimate_lipschitz(spec, pt, 20)?;
    Ok(0.9 * mu / lip.max(mu))
}

pub fn solve_equilibrium(
    spec: &GameSpec,
    e: &Perturbation,
    t: &TiltVector,
    settings: &SolverSettings,
    warm_start: Option<&ControlProfile>,
) -> Result<EquilibriumResult> {
    settings.validate()?;
    e.validate(spec)?;
    let start = match warm_start {
        Some(u) => u.clone(),
        None => ControlProfile::zeros(spec),
    };
    let u0 = spec.project_admissible(e, &start)?;
    match settings.method {
        Method::ProjectedFixedPoint => projected_fixed_point(spec, e, t, settings, u0),
        Method::GaussSeidelBestResponse => best_response(spec, e, t, settings, u0),
    }
}

struct Iterate {
    u: ControlProfile,
    pt: EquilibriumPoint,
    f: ControlProfile,
    residual: f64,
}

impl Iterate {
    fn new(spec: &GameSpec, e: &Perturbation, t: &TiltVector, u: ControlProfile) -> Result<Self> {
        Self::build(spec, e, t, u, EquilibriumPoint::evaluate)
    }

    /// Newton for the new state starts from this iterate's state.
    fn next(&self, spec: &GameSpec, e: &Perturbation, t: &TiltVector, u: ControlProfile) -> Result<Self> {
        let y0 = &self.pt.y;
        Self::build(spec, e, t, u, |spec, u, e| {
            EquilibriumPoint::with_state(spec, u, e, spec.state_from(u, e, y0)?)
        })
    }

    fn build(
        spec: &GameSpec,
        e: &Perturbation,
        t: &TiltVector,
        u: ControlProfile,
        eval: impl FnOnce(&GameSpec, &ControlProfile, &Perturbation) -> Result<EquilibriumPoint>,
    ) -> Result<Self> {
        let pt = eval(spec, &u, e)?;
        let f = pseudo_gradient(spec, &pt);
        let residual = natural_residual(spec, e, t, &u, &f)?;
        Ok(Self { u, pt, f, residual })
    }

    fn finish(self, t: &TiltVector, iterations: usize, tol: f64, tau: f64, history: Vec<f64>) -> EquilibriumResult {
        EquilibriumResult {
            u_hat_star: t.sub(&self.f),
            converged: self.residual <= tol,
            residual: self.residual,
            u_bar: self.u,
            point: self.pt,
            tilt: t.clone(),
            iterations,
            tau,
            history,
        }
    }
}

fn projected_fixed_point(
    spec: &GameSpec,
    e: &Perturbation,
    t: &TiltVector,
    settings: &SolverSettings,
    u0: ControlProfile,
) -> Result<EquilibriumResult> {
    let tol = settings.residual_tolerance;
    let mut current = Iterate::new(spec, e, t, u0)?;
    let mut tau = match settings.tau {
        Some(tau) => tau,
        None => default_tau(spec, &current.pt)?,
    };
    let mut history = vec![current.residual];
    let mut best: Option<Iterate> = None;
    let mut iterations = 0;
    let mut anderson = Anderson::new(settings.anderson_depth);
    while current.residual > tol && iterations < settings.max_outer_iters {
        iterations += 1;
        let step = current.u.sub(&current.f.sub(t).scale(tau));
        let plain = spec.project_admissible(e, &step)?;
        let mixed = anderson.extrapolate(&flatten(&plain), &flatten(&plain.sub(&current.u)));
        let accelerated = match mixed {
            Some(x) => {
                let candidate = spec.project_admissible(e, &unflatten(spec, &x))?;
                let accepted = current
                    .next(spec, e, t, candidate)
                    .ok()
                    .filter(|n| n.residual < current.residual);
                if accepted.is_none() {
                    // keep the latest pair so mixing restarts right away
                    anderson.forget_history();
                }
                accepted
            }
            None => None,
        };
        let next = match accelerated {
            Some(n) => n,
            None => current.next(spec, e, t, plain)?,
        };
        let reference = best.as_ref().map_or(current.residual, |b| b.residual);
        if next.residual > 2.0 * reference || !next.residual.is_finite() {
            // diverging: shrink the step and restart from the best iterate
            tau *= 0.5;
            anderson.reset();
            if let Some(b) = best.take() {
                current = b;
            }
            history.push(current.residual);
            continue;
        }
        if best.as_ref().is_none_or(|b| current.residual < b.residual) {
            best = Some(Iterate {
                u: current.u.clone(),
                pt: current.pt.clone(),
                f: current.f.clone(),
                residual: current.residual,
            });
        }
        current = next;
        history.push(current.residual);
    }
    if current.residual > tol {
        if let Some(b) = best.filter(|b| b.residual < current.residual) {
            current = b;
        }
    }
    Ok(current.finish(t, iterations, tol, tau, history))
}

fn best_response(
    spec: &GameSpec,
    e: &Perturbation,
    t: &TiltVector,
    settings: &SolverSettings,
    u0: ControlProfile,
) -> Result<EquilibriumResult> {
    let tol = settings.residual_tolerance;
    let mut current = Iterate::new(spec, e, t, u0)?;
    let tau = match settings.tau {
        Some(tau) => tau,
        None => default_tau(spec, &current.pt)?,
    };
    let mut history = vec![current.residual];
    let mut iterations = 0;
    let inner_tol = 0.1 * tol / (spec.num_players() as f64).sqrt();
    while current.residual > tol && iterations < settings.max_outer_iters {
        iterations += 1;
        for k in 0..spec.num_players() {
            let mut anderson = Anderson::new(settings.anderson_depth);
            let mut own = player_residual(spec, e, t, &current, k);
            for _ in 0..settings.inner_iters {
                if own <= inner_tol {
                    break;
                }
                let uk = current.u.get(k);
                let plain = spec.project_player(k, e, &uk.axpy(-tau, &(current.f.get(k) - t.get(k))));
                if (&plain - uk).max_abs() == 0.0 {
                    break;
                }
                let with = |v: GridFunction| {
                    let mut u = current.u.clone();
                    u.set(k, v);
                    current.next(spec, e, t, u)
                };
                let mut accepted = None;
                if let Some(x) = anderson.extrapolate(plain.values(), (&plain - uk).values()) {
                    let candidate = spec.project_player(k, e, &GridFunction::from_raw(spec.grid(), x));
                    accepted = with(candidate)
                        .ok()
                        .map(|n| (player_residual(spec, e, t, &n, k), n))
                        .filter(|(r, _)| *r < own);
                    if accepted.is_none() {
                        anderson.forget_history();
                    }
                }
                let (r, next) = match accepted {
                    Some(pair) => pair,
                    None => {
                        let n = with(plain)?;
                        (player_residual(spec, e, t, &n, k), n)
                    }
                };
                own = r;
                current = next;
            }
        }
        history.push(current.residual);
    }
    Ok(current.finish(t, iterations, tol, tau, history))
}

/// Natural residual of player `k` alone: `‖u_k − P_k(u_k − (F_k − t_k))‖`.
fn player_residual(spec: &GameSpec, e: &Perturbation, t: &TiltVector, it: &Iterate, k: usize) -> f64 {
    let uk = it.u.get(k);
    let g = it.f.get(k) - t.get(k);
    crate::mesh::l2_norm(&(uk - &spec.project_player(k, e, &(uk - &g))))
}

fn flatten(v: &ControlProfile) -> Vec<f64> {
    v.iter().flat_map(|c| c.values().iter().copied()).collect()
}

fn unflatten(spec: &GameSpec, x: &[f64]) -> ControlProfile {
    let n = spec.grid().num_interior();
    ControlProfile::new(
        x.chunks(n)
            .map(|c| GridFunction::from_raw(spec.grid(), c.to_vec()))
            .collect(),
    )
}

/// Type-II Anderson mixing of the projected fixed-point map `G`: with the
/// last differences of `G(u_i)` and of `f_i = G(u_i) − u_i`, the next iterate
/// is `G(u_k) − ΔG γ` where `γ` minimizes `‖f_k − ΔF γ‖`.
struct Anderson {
    depth: usize,
    previous: Option<(Vec<f64>, Vec<f64>)>,
    dg: VecDeque<Vec<f64>>,
    df: VecDeque<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self {
            depth,
            previous: None,
            dg: VecDeque::new(),
            df: VecDeque::new(),
        }
    }

    fn reset(&mut self) {
        self.previous = None;
        self.forget_history();
    }

    fn forget_history(&mut self) {
        self.dg.clear();
        self.df.clear();
    }

    /// Records `(G(u_k), f_k)` and returns the mixed iterate, if any.
    fn extrapolate(&mut self, g: &[f64], f: &[f64]) -> Option<Vec<f64>> {
        if self.depth == 0 {
            return None;
        }
        if let Some((gp, fp)) = self.previous.take() {
            self.dg.push_back(g.iter().zip(&gp).map(|(a, b)| a - b).collect());
            self.df.push_back(f.iter().zip(&fp).map(|(a, b)| a - b).collect());
            if self.dg.len() > self.depth {
                self.dg.pop_front();
                self.df.pop_front();
            }
        }
        self.previous = Some((g.to_vec(), f.to_vec()));
        if self.df.is_empty() {
            return None;
        }
        let n = f.len();
        let cols = self.df.len();
        let a = DMatrix::from_fn(n, cols, |i, j| self.df[j][i]);
        let b = DVector::from_column_slice(f);
        let gamma = a.svd(true, true).solve(&b, 1e-12).ok()?;
        let mut out = g.to_vec();
        for (j, dgj) in self.dg.iter().enumerate() {
            out.iter_mut().zip(dgj).for_each(|(o, d)| *o -= gamma[j] * d);
        }
        out.iter().all(|v| v.is_finite()).then_some(out)
    }
}

/// Per-player outcome of the node-wise normal-cone test.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerConeCheck {
    pub passed: bool,
    pub worst_violation: f64,
    pub worst_node: Option<usize>,
    pub at_lower: usize,
    pub at_upper: usize,
    pub interior: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeReport {
    pub players: Vec<PlayerConeCheck>,
    pub tolerance: f64,
}

impl ConeReport {
    pub fn passed(&self) -> bool {
        self.players.iter().all(|p| p.passed)
    }

    pub fn worst_violation(&self) -> f64 {
        self.players.iter().map(|p| p.worst_violation).fold(0.0, f64::max)
    }
}

/// Checks `û*_k ∈ N(ū_k; box)` node-wise: `û* ≤ 0` on the lower bound,
/// `û* ≥ 0` on the upper bound and `û* = 0` in between, up to `tolerance`.
pub fn check_variational_equilibrium(spec: &GameSpec, result: &EquilibriumResult, tolerance: f64) -> ConeReport {
    let e = result.perturbation();
    let players = (0..spec.num_players())
        .map(|k| {
            let lo = spec.lower_bound(k, e);
            let hi = spec.upper_bound(k, e);
            let u = result.u_bar.get(k).values();
            let r = result.u_hat_star.get(k).values();
            let mut check = PlayerConeCheck {
                passed: true,
                worst_violation: 0.0,
                worst_node: None,
                at_lower: 0,
                at_upper: 0,
                interior: 0,
            };
            for i in 0..u.len() {
                let (a, b) = (lo.values()[i], hi.values()[i]);
                let slack = 1e-12 * (1.0 + a.abs().max(b.abs()));
                let violation = if u[i] <= a + slack {
                    check.at_lower += 1;
                    r[i].max(0.0)
                } else if u[i] >= b - slack {
                    check.at_upper += 1;
                    (-r[i]).max(0.0)
                } else {
                    check.interior += 1;
                    r[i].abs()
                };
                if violation > check.worst_violation {
                    check.worst_violation = violation;
                    check.worst_node = Some(i);
                }
            }
            check.passed = check.worst_violation <= tolerance;
            check
        })
        .collect();
    ConeReport { players, tolerance }
}
