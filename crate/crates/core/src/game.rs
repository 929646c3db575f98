//! Game description: shared state equation, per-player data, parametric
//! box constraints, basic perturbations and tilts, and the parametric cost
//! functionals.
//!
//! Player `k` minimizes over its box
//!
//! ```text
//! 𝓙_k(u, e) = ∫ L_k(x, y) + ½ ∫ ζ_k u_k² + (e_kJ, y) − (u*_k, u_k)
//! ```
//!
//! where `y` solves `A y + f(x, y) = Σ_i B_i u_i + e_Y` and the box is
//! `[α_k + e_kα, β_k + e_kβ]` node-wise.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::{Expr, Point, Var};
use crate::mesh::{inner_product, l2_norm, Grid, GridFunction};
use crate::pde::{EllipticOperator, Nonlinearity, StateEquation};

/// Default feasibility margin `σ` between perturbed bounds.
pub const DEFAULT_SIGMA: f64 = 1e-6;

/// State values at which `∂f/∂y ≥ 0` is sampled by default.
pub const DEFAULT_MONOTONICITY_RANGE: f64 = 10.0;

/// A player integrand `L_k(x, y, yd)` with its first two `y`-derivatives.
#[derive(Debug, Clone)]
pub struct Integrand {
    l: Expr,
    dl: Expr,
    d2l: Expr,
}

impl Integrand {
    pub fn new(l: Expr) -> Self {
        let dl = l.diff_y();
        let d2l = dl.diff_y();
        Self { l, dl, d2l }
    }

    pub fn expr(&self) -> &Expr {
        &self.l
    }

    fn sample(e: &Expr, y: &GridFunction, yd: &GridFunction) -> Result<GridFunction> {
        let grid = y.grid();
        let values = y
            .values()
            .iter()
            .zip(yd.values())
            .enumerate()
            .map(|(i, (&yi, &ydi))| e.eval(&Point::new(grid.coords(i), yi, ydi)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GridFunction::from_raw(grid, values))
    }

    pub fn value(&self, y: &GridFunction, yd: &GridFunction) -> Result<GridFunction> {
        Self::sample(&self.l, y, yd)
    }

    pub fn first(&self, y: &GridFunction, yd: &GridFunction) -> Result<GridFunction> {
        Self::sample(&self.dl, y, yd)
    }

    pub fn second(&self, y: &GridFunction, yd: &GridFunction) -> Result<GridFunction> {
        Self::sample(&self.d2l, y, yd)
    }
}

#[derive(Debug, Clone)]
pub struct PlayerSpec {
    pub integrand: Integrand,
    pub yd: GridFunction,
    pub zeta: GridFunction,
    pub zeta_floor: f64,
    pub b: GridFunction,
    pub alpha: GridFunction,
    pub beta: GridFunction,
}

impl PlayerSpec {
    fn validate(&self, k: usize, grid: &Arc<Grid>) -> Result<()> {
        for (name, field) in [
            ("yd", &self.yd),
            ("zeta", &self.zeta),
            ("B", &self.b),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
        ] {
            if field.grid().as_ref() != grid.as_ref() {
                return Err(Error::InvalidSpec(format!(
                    "player {k}: `{name}` lives on a different grid"
                )));
            }
            if !field.is_finite() {
                return Err(Error::InvalidSpec(format!("player {k}: `{name}` is not finite")));
            }
        }
        if !(self.zeta_floor > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "player {k}: zeta_floor must be positive, got {}",
                self.zeta_floor
            )));
        }
        if let Some(i) = self.zeta.values().iter().position(|&z| z < self.zeta_floor) {
            return Err(Error::InvalidSpec(format!(
                "player {k}: zeta = {} at node {i} is below zeta_floor = {}",
                self.zeta.values()[i],
                self.zeta_floor
            )));
        }
        if let Some(i) = self
            .alpha
            .values()
            .iter()
            .zip(self.beta.values())
            .position(|(a, b)| a >= b)
        {
            return Err(Error::InvalidSpec(format!(
                "player {k}: alpha < beta violated at node {i} ({} >= {})",
                self.alpha.values()[i],
                self.beta.values()[i]
            )));
        }
        if self.integrand.expr().uses(Var::X2) && grid.dim() < 2 {
            return Err(Error::InvalidSpec(format!("player {k}: L references x2 on a 1D grid")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GameSpec {
    grid: Arc<Grid>,
    state: StateEquation,
    players: Vec<PlayerSpec>,
}

impl GameSpec {
    /// Validates the player data and samples `∂f/∂y ≥ 0` over the grid and
    /// `y ∈ [−range, range]`.
    pub fn new(op: EllipticOperator, f: Expr, players: Vec<PlayerSpec>, monotonicity_range: f64) -> Result<Self> {
        let grid = Arc::clone(op.grid());
        if players.is_empty() {
            return Err(Error::InvalidSpec("a game needs at least one player".into()));
        }
        if f.uses(Var::Yd) {
            return Err(Error::InvalidSpec("f must not reference yd".into()));
        }
        if f.uses(Var::X2) && grid.dim() < 2 {
            return Err(Error::InvalidSpec("f references x2 on a 1D grid".into()));
        }
        for (k, p) in players.iter().enumerate() {
            p.validate(k, &grid)?;
        }
        let f = Nonlinearity::new(f);
        let samples: Vec<f64> = (0..=40).map(|i| monotonicity_range * (i as f64 / 20.0 - 1.0)).collect();
        let min_df = f.min_derivative(&grid, &samples)?;
        if min_df < -1e-12 {
            return Err(Error::InvalidSpec(format!(
                "f is not monotone in y: sampled ∂f/∂y reaches {min_df:e} < 0"
            )));
        }
        Ok(Self {
            grid,
            state: StateEquation::new(op, f),
            players,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn state_equation(&self) -> &StateEquation {
        &self.state
    }

    pub fn state_equation_mut(&mut self) -> &mut StateEquation {
        &mut self.state
    }

    pub fn players(&self) -> &[PlayerSpec] {
        &self.players
    }

    pub fn players_mut(&mut self) -> &mut [PlayerSpec] {
        &mut self.players
    }

    pub fn num_players(&self) -> usize {
        self.players.len()
    }

    pub fn min_zeta_floor(&self) -> f64 {
        self.players.iter().map(|p| p.zeta_floor).fold(f64::INFINITY, f64::min)
    }

    /// State of the perturbed equation driven by `Σ B_i u_i + e_Y`.
    pub fn state(&self, u: &ControlProfile, e: &Perturbation) -> Result<GridFunction> {
        self.state.solve_state(&self.total_source(u, e)?)
    }

    /// As [`GameSpec::state`], with Newton started from `initial`.
    pub fn state_from(&self, u: &ControlProfile, e: &Perturbation, initial: &GridFunction) -> Result<GridFunction> {
        self.state.solve_state_from(&self.total_source(u, e)?, initial.clone())
    }

    pub fn total_source(&self, u: &ControlProfile, e: &Perturbation) -> Result<GridFunction> {
        self.check_profile(u)?;
        let mut acc = e.e_y.clone();
        acc.check_same_grid(u.get(0))?;
        for (p, uk) in self.players.iter().zip(u.iter()) {
            acc = acc.zip_map(&p.b.hadamard(uk), |a, b| a + b);
        }
        Ok(acc)
    }

    pub fn lower_bound(&self, k: usize, e: &Perturbation) -> GridFunction {
        &self.players[k].alpha + &e.players[k].e_alpha
    }

    pub fn upper_bound(&self, k: usize, e: &Perturbation) -> GridFunction {
        &self.players[k].beta + &e.players[k].e_beta
    }

    /// Exact `L²` projection onto the product of perturbed boxes.
    pub fn project_admissible(&self, e: &Perturbation, u: &ControlProfile) -> Result<ControlProfile> {
        self.check_profile(u)?;
        Ok(ControlProfile::new(
            (0..self.num_players())
                .map(|k| self.project_player(k, e, u.get(k)))
                .collect(),
        ))
    }

    pub fn project_player(&self, k: usize, e: &Perturbation, v: &GridFunction) -> GridFunction {
        let lo = self.lower_bound(k, e);
        let hi = self.upper_bound(k, e);
        let values = v
            .values()
            .iter()
            .zip(lo.values().iter().zip(hi.values()))
            .map(|(&x, (&a, &b))| x.max(a).min(b))
            .collect();
        GridFunction::from_raw(&self.grid, values)
    }

    pub fn is_feasible(&self, e: &Perturbation, u: &ControlProfile) -> bool {
        (0..self.num_players()).all(|k| {
            let lo = self.lower_bound(k, e);
            let hi = self.upper_bound(k, e);
            u.get(k)
                .values()
                .iter()
                .zip(lo.values().iter().zip(hi.values()))
                .all(|(&x, (&a, &b))| a <= x && x <= b)
        })
    }

    /// Parametric cost of player `k`, tilt included.
    pub fn cost(&self, k: usize, u: &ControlProfile, e: &Perturbation, t: &TiltVector) -> Result<f64> {
        let y = self.state(u, e)?;
        self.cost_with_state(k, u, &y, e, t)
    }

    pub fn cost_with_state(
        &self,
        k: usize,
        u: &ControlProfile,
        y: &GridFunction,
        e: &Perturbation,
        t: &TiltVector,
    ) -> Result<f64> {
        let p = &self.players[k];
        let uk = u.get(k);
        let tracking = inner_product(&p.integrand.value(y, &p.yd)?, &GridFunction::constant(&self.grid, 1.0))?;
        let control = 0.5 * inner_product(&p.zeta.hadamard(uk), uk)?;
        let linear = inner_product(&e.players[k].e_j, y)?;
        let tilt = inner_product(t.get(k), uk)?;
        Ok(tracking + control + linear - tilt)
    }

    fn check_profile(&self, u: &ControlProfile) -> Result<()> {
        if u.len() != self.num_players() {
            return Err(Error::GridMismatch(format!(
                "profile has {} components for {} players",
                u.len(),
                self.num_players()
            )));
        }
        for uk in u.iter() {
            if uk.grid().as_ref() != self.grid.as_ref() {
                return Err(Error::GridMismatch("profile component on a foreign grid".into()));
            }
        }
        Ok(())
    }
}

/// Per-player basic perturbation components.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerShift {
    pub e_j: GridFunction,
    pub e_alpha: GridFunction,
    pub e_beta: GridFunction,
}

impl PlayerShift {
    pub fn zero(grid: &Arc<Grid>) -> Self {
        Self {
            e_j: GridFunction::zeros(grid),
            e_alpha: GridFunction::zeros(grid),
            e_beta: GridFunction::zeros(grid),
        }
    }
}

/// Basic parameter `e = (e_Y, (e_kJ, e_kα, e_kβ)_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub e_y: GridFunction,
    pub players: Vec<PlayerShift>,
    sigma: f64,
}

impl Perturbation {
    /// Rejects shifts whose boxes violate `α + e_α + σ ≤ β + e_β`.
    pub fn new(spec: &GameSpec, e_y: GridFunction, players: Vec<PlayerShift>, sigma: f64) -> Result<Self> {
        let e = Self { e_y, players, sigma };
        e.validate(spec)?;
        Ok(e)
    }

    /// Builds a perturbation (or a direction in parameter space) without
    /// checking feasibility.
    pub(crate) fn new_unchecked(e_y: GridFunction, players: Vec<PlayerShift>, sigma: f64) -> Self {
        Self { e_y, players, sigma }
    }

    pub fn zero(spec: &GameSpec) -> Self {
        Self::zero_with_sigma(spec, DEFAULT_SIGMA)
    }

    pub fn zero_with_sigma(spec: &GameSpec, sigma: f64) -> Self {
        let grid = spec.grid();
        Self {
            e_y: GridFunction::zeros(grid),
            players: (0..spec.num_players()).map(|_| PlayerShift::zero(grid)).collect(),
            sigma,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn validate(&self, spec: &GameSpec) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InfeasiblePerturbation(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.players.len() != spec.num_players() {
            return Err(Error::InfeasiblePerturbation(format!(
                "{} player shifts for {} players",
                self.players.len(),
                spec.num_players()
            )));
        }
        let grid = spec.grid();
        let fields =
            std::iter::once(&self.e_y).chain(self.players.iter().flat_map(|s| [&s.e_j, &s.e_alpha, &s.e_beta]));
        for field in fields {
            if field.grid().as_ref() != grid.as_ref() || !field.is_finite() {
                return Err(Error::InfeasiblePerturbation(
                    "perturbation field on a foreign grid or not finite".into(),
                ));
            }
        }
        for k in 0..spec.num_players() {
            if let Some(gap) = self.feasibility_gap(spec, k) {
                return Err(Error::InfeasiblePerturbation(format!(
                    "player {k}: perturbed bounds leave a gap of {gap:e} < sigma = {:e}",
                    self.sigma
                )));
            }
        }
        Ok(())
    }

    /// Smallest `(β + e_β) − (α + e_α)` when it falls below `σ`.
    fn feasibility_gap(&self, spec: &GameSpec, k: usize) -> Option<f64> {
        let gap = (&spec.upper_bound(k, self) - &spec.lower_bound(k, self))
            .values()
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v));
        (gap < self.sigma).then_some(gap)
    }

    /// `‖e_Y‖ + Σ_k (‖e_kJ‖ + max|e_kα| + max|e_kβ|)`.
    pub fn norm(&self) -> f64 {
        l2_norm(&self.e_y)
            + self
                .players
                .iter()
                .map(|s| l2_norm(&s.e_j) + s.e_alpha.max_abs() + s.e_beta.max_abs())
                .sum::<f64>()
    }

    /// Parameter-space distance `‖self − other‖`.
    pub fn distance(&self, other: &Perturbation) -> f64 {
        self.combine(other, -1.0).norm()
    }

    /// `self + c·other` component-wise, without feasibility validation.
    pub fn combine(&self, other: &Perturbation, c: f64) -> Perturbation {
        Perturbation {
            e_y: self.e_y.axpy(c, &other.e_y),
            players: self
                .players
                .iter()
                .zip(&other.players)
                .map(|(a, b)| PlayerShift {
                    e_j: a.e_j.axpy(c, &b.e_j),
                    e_alpha: a.e_alpha.axpy(c, &b.e_alpha),
                    e_beta: a.e_beta.axpy(c, &b.e_beta),
                })
                .collect(),
            sigma: self.sigma,
        }
    }

    pub fn scaled(&self, c: f64) -> Perturbation {
        Perturbation {
            e_y: self.e_y.scale(c),
            players: self
                .players
                .iter()
                .map(|s| PlayerShift {
                    e_j: s.e_j.scale(c),
                    e_alpha: s.e_alpha.scale(c),
                    e_beta: s.e_beta.scale(c),
                })
                .collect(),
            sigma: self.sigma,
        }
    }
}

/// A list of one grid function per player; used for controls, tilts and
/// pseudo-gradients alike.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProfile(Vec<GridFunction>);

/// Tilt `u* = (u*_1, …, u*_m)`.
pub type TiltVector = ControlProfile;

impl ControlProfile {
    pub fn new(components: Vec<GridFunction>) -> Self {
        Self(components)
    }

    pub fn zeros(spec: &GameSpec) -> Self {
        Self(
            (0..spec.num_players())
                .map(|_| GridFunction::zeros(spec.grid()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> &GridFunction {
        &self.0[k]
    }

    pub fn set(&mut self, k: usize, v: GridFunction) {
        self.0[k] = v;
    }

    pub fn iter(&self) -> std::slice::Iter<'_, GridFunction> {
        self.0.iter()
    }

    pub fn components(&self) -> &[GridFunction] {
        &self.0
    }

    pub fn into_components(self) -> Vec<GridFunction> {
        self.0
    }

    pub fn zip_map(&self, other: &ControlProfile, f: impl Fn(&GridFunction, &GridFunction) -> GridFunction) -> Self {
        assert_eq!(self.len(), other.len(), "profiles with different player counts");
        Self(self.0.iter().zip(&other.0).map(|(a, b)| f(a, b)).collect())
    }

    pub fn sub(&self, other: &ControlProfile) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &ControlProfile) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn axpy(&self, c: f64, other: &ControlProfile) -> Self {
        self.zip_map(other, |a, b| a.axpy(c, b))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(self.0.iter().map(|a| a.scale(c)).collect())
    }

    /// `Σ_k (a_k, b_k)`.
    pub fn inner(&self, other: &ControlProfile) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::GridMismatch("profiles with different player counts".into()));
        }
        self.0.iter().zip(&other.0).map(|(a, b)| inner_product(a, b)).sum()
    }

    /// Norm of the product space `L²(Ω)^m`.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|a| l2_norm(a).powi(2)).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(GridFunction::max_abs).fold(0.0, f64::max)
    }
}
