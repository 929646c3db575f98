//! JSON configuration: parsing, hashing and conversion into a validated
//! game instance with solver, certificate and harness settings.

use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::equilibrium::{Method, SolverSettings};
use crate::error::{Error, Result};
use crate::expr::{Expr, Point, Var};
use crate::game::{
    ControlProfile, GameSpec, Integrand, Perturbation, PlayerShift, PlayerSpec, TiltVector, DEFAULT_MONOTONICITY_RANGE,
    DEFAULT_SIGMA,
};
use crate::mesh::{Grid, GridFunction};
use crate::pde::{Coefficients, EllipticOperator};
use crate::perturb::HarnessSettings;
use crate::stability::{CertifySettings, EigenMethod, DEFAULT_DELTA};

/// A constant or an expression in `x1`, `x2`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Field {
    Number(f64),
    Expression(String),
}

impl Default for Field {
    fn default() -> Self {
        Field::Number(0.0)
    }
}

fn one() -> Field {
    Field::Number(1.0)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub extents: Vec<[f64; 2]>,
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorConfig {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        let c = Coefficients::default();
        Self {
            a11: c.a11,
            a12: c.a12,
            a22: c.a22,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlayerConfig {
    #[serde(rename = "L")]
    pub l: String,
    #[serde(default)]
    pub yd: Field,
    pub zeta: Field,
    /// Defaults to the smallest nodal value of `zeta`.
    #[serde(default)]
    pub zeta_floor: Option<f64>,
    #[serde(rename = "B", default = "one")]
    pub b: Field,
    pub alpha: Field,
    pub beta: Field,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlayerShiftConfig {
    #[serde(rename = "e_J", default)]
    pub e_j: Field,
    #[serde(default)]
    pub e_alpha: Field,
    #[serde(default)]
    pub e_beta: Field,
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    #[serde(rename = "e_Y", default)]
    pub e_y: Field,
    /// One entry per player; omitted entries are zero.
    #[serde(default)]
    pub players: Vec<PlayerShiftConfig>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: String,
    pub tau: Option<f64>,
    pub tolerance: f64,
    pub max_iters: usize,
    pub inner_iters: usize,
    pub anderson_depth: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            method: s.method.to_string(),
            tau: s.tau,
            tolerance: s.residual_tolerance,
            max_iters: s.max_outer_iters,
            inner_iters: s.inner_iters,
            anderson_depth: s.anderson_depth,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    pub delta: f64,
    pub eps_act: Option<f64>,
    pub method: String,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            eps_act: None,
            method: EigenMethod::Auto.to_string(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub samples: usize,
    pub radius_tilt: f64,
    pub radius_param: f64,
    pub seed: u64,
    pub ell_max: f64,
    pub local_nash_samples: usize,
    pub local_nash_radius: f64,
    pub local_nash_seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        let h = HarnessSettings::default();
        Self {
            samples: h.samples,
            radius_tilt: h.radius_tilt,
            radius_param: h.radius_param,
            seed: h.seed,
            ell_max: h.ell_max,
            local_nash_samples: 100,
            local_nash_radius: 1e-2,
            local_nash_seed: 11,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub grid: GridConfig,
    #[serde(default)]
    pub operator: OperatorConfig,
    pub f: String,
    pub players: Vec<PlayerConfig>,
    #[serde(default)]
    pub perturbation: Option<PerturbationConfig>,
    /// One entry per player; zero when omitted.
    #[serde(default)]
    pub tilt: Option<Vec<Field>>,
    #[serde(default)]
    pub monotonicity_range: Option<f64>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    #[serde(default)]
    pub harness: HarnessConfig,
}

/// Local-Nash sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalNashSettings {
    pub samples: usize,
    pub radius: f64,
    pub seed: u64,
}

/// A fully validated problem with every stage's settings.
#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: GameSpec,
    pub perturbation: Perturbation,
    pub tilt: TiltVector,
    pub solver: SolverSettings,
    pub certify: CertifySettings,
    pub harness: HarnessSettings,
    pub local_nash: LocalNashSettings,
    pub hash: String,
}

/// SHA-256 of the compact serialization of the parsed tree. Object keys are
/// sorted, so formatting and key order do not affect the hash.
pub fn config_hash(value: &Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load(path: &Path) -> Result<Instance> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Instance> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    let hash = config_hash(&value);
    let config: Config = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    config.build(hash)
}

fn config_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

fn parse_expr(key: &str, text: &str) -> Result<Expr> {
    Expr::parse(text).map_err(|e| config_err(key, e))
}

fn field(grid: &Arc<Grid>, key: &str, value: &Field) -> Result<GridFunction> {
    match value {
        Field::Number(c) if c.is_finite() => Ok(GridFunction::constant(grid, *c)),
        Field::Number(c) => Err(config_err(key, format!("value {c} is not finite"))),
        Field::Expression(text) => {
            let expr = parse_expr(key, text)?;
            if expr.uses(Var::Y) || expr.uses(Var::Yd) {
                return Err(config_err(key, "fields may only depend on x1 and x2"));
            }
            if expr.uses(Var::X2) && grid.dim() < 2 {
                return Err(config_err(key, "x2 used on a 1D grid"));
            }
            let values = (0..grid.num_interior())
                .map(|i| {
                    expr.eval(&Point {
                        x: grid.coords(i),
                        y: 0.0,
                        yd: 0.0,
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| config_err(key, e))?;
            GridFunction::from_values(grid, values).map_err(|e| config_err(key, e))
        }
    }
}

impl Config {
    pub fn build(&self, hash: String) -> Result<Instance> {
        let g = &self.grid;
        if g.extents.len() != g.dim || g.points.len() != g.dim {
            return Err(config_err(
                "grid",
                format!(
                    "dim = {} but extents/points have lengths {}/{}",
                    g.dim,
                    g.extents.len(),
                    g.points.len()
                ),
            ));
        }
        let grid = Arc::new(
            Grid::new(g.extents.iter().map(|e| (e[0], e[1])).collect(), g.points.clone())
                .map_err(|e| config_err("grid", e))?,
        );
        let coeffs = Coefficients {
            a11: self.operator.a11,
            a12: self.operator.a12,
            a22: self.operator.a22,
        };
        let op = EllipticOperator::new(&grid, coeffs).map_err(|e| config_err("operator", e))?;
        let f = parse_expr("f", &self.f)?;
        if self.players.is_empty() {
            return Err(config_err("players", "at least one player is required"));
        }
        let players = self
            .players
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let key = |name: &str| format!("players[{k}].{name}");
                let l = parse_expr(&key("L"), &p.l)?;
                let zeta = field(&grid, &key("zeta"), &p.zeta)?;
                let zeta_floor = p
                    .zeta_floor
                    .unwrap_or_else(|| zeta.values().iter().copied().fold(f64::INFINITY, f64::min));
                if !(zeta_floor > 0.0) {
                    return Err(config_err(
                        &key("zeta"),
                        format!("the zeta floor must be positive (zeta >= zeta_floor > 0), got {zeta_floor}"),
                    ));
                }
                Ok(PlayerSpec {
                    integrand: Integrand::new(l),
                    yd: field(&grid, &key("yd"), &p.yd)?,
                    zeta,
                    zeta_floor,
                    b: field(&grid, &key("B"), &p.b)?,
                    alpha: field(&grid, &key("alpha"), &p.alpha)?,
                    beta: field(&grid, &key("beta"), &p.beta)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let range = self.monotonicity_range.unwrap_or(DEFAULT_MONOTONICITY_RANGE);
        if !(range > 0.0 && range.is_finite()) {
            return Err(config_err("monotonicity_range", "must be positive"));
        }
        let m = players.len();
        let spec = GameSpec::new(op, f, players, range).map_err(|e| match &e {
            Error::InvalidSpec(msg) if msg.contains("not monotone") || msg.starts_with('f') => config_err("f", e),
            _ => config_err("players", e),
        })?;

        let perturbation = match &self.perturbation {
            None => Perturbation::zero(&spec),
            Some(pc) => {
                if pc.players.len() > m {
                    return Err(config_err(
                        "perturbation.players",
                        format!("{} entries for {m} players", pc.players.len()),
                    ));
                }
                let shifts = (0..m)
                    .map(|k| {
                        let key = |name: &str| format!("perturbation.players[{k}].{name}");
                        let s = pc.players.get(k).cloned().unwrap_or_default();
                        Ok(PlayerShift {
                            e_j: field(&grid, &key("e_J"), &s.e_j)?,
                            e_alpha: field(&grid, &key("e_alpha"), &s.e_alpha)?,
                            e_beta: field(&grid, &key("e_beta"), &s.e_beta)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let e_y = field(&grid, "perturbation.e_Y", &pc.e_y)?;
                Perturbation::new(&spec, e_y, shifts, pc.sigma).map_err(|e| config_err("perturbation", e))?
            }
        };

        let tilt = match &self.tilt {
            None => ControlProfile::zeros(&spec),
            Some(list) => {
                if list.len() != m {
                    return Err(config_err("tilt", format!("{} entries for {m} players", list.len())));
                }
                ControlProfile::new(
                    list.iter()
                        .enumerate()
                        .map(|(k, t)| field(&grid, &format!("tilt[{k}]"), t))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };

        let sc = &self.solver;
        let solver = SolverSettings {
            method: sc
                .method
                .parse::<Method>()
                .map_err(|e| config_err("solver.method", e))?,
            tau: sc.tau,
            residual_tolerance: sc.tolerance,
            max_outer_iters: sc.max_iters,
            inner_iters: sc.inner_iters,
            anderson_depth: sc.anderson_depth,
        };
        solver.validate().map_err(|e| config_err("solver", e))?;

        let cc = &self.certify;
        let certify = CertifySettings {
            delta: cc.delta,
            eps_act: cc.eps_act,
            method: cc
                .method
                .parse::<EigenMethod>()
                .map_err(|e| config_err("certify.method", e))?,
            ..CertifySettings::default()
        };
        validate_certify(&certify).map_err(|e| config_err("certify", e))?;

        let hc = &self.harness;
        let harness = HarnessSettings {
            samples: hc.samples,
            radius_tilt: hc.radius_tilt,
            radius_param: hc.radius_param,
            seed: hc.seed,
            ell_max: hc.ell_max,
            solver: solver.clone(),
            ..HarnessSettings::default()
        };
        harness.validate().map_err(|e| config_err("harness", e))?;
        if !(hc.local_nash_radius >= 0.0 && hc.local_nash_radius.is_finite()) {
            return Err(config_err("harness.local_nash_radius", "must be non-negative"));
        }
        let local_nash = LocalNashSettings {
            samples: hc.local_nash_samples,
            radius: hc.local_nash_radius,
            seed: hc.local_nash_seed,
        };
        Ok(Instance {
            spec,
            perturbation,
            tilt,
            solver,
            certify,
            harness,
            local_nash,
            hash,
        })
    }
}

pub(crate) fn validate_certify(c: &CertifySettings) -> Result<()> {
    if !(c.delta > 0.0 && c.delta.is_finite()) {
        return Err(Error::InvalidSettings(format!(
            "delta must be positive, got {}",
            c.delta
        )));
    }
    if let Some(eps) = c.eps_act {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidSettings(format!("eps_act must be positive, got {eps}")));
        }
    }
    Ok(())
}
