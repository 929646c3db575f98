//! Full-stability certificates for box-constrained equilibria.
//!
//! At a box constraint the critical subspace is the set of profiles that
//! vanish wherever the residual `û*` is nonzero. The certificate is the
//! smallest eigenvalue of the symmetrized Jacobian compressed to that
//! subspace; a margin `δ > 0` below it certifies full stability.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calculus::{hessian_block_apply, pseudo_gradient, symmetrized_apply, EquilibriumPoint};
use crate::equilibrium::EquilibriumResult;
use crate::error::{Error, Result};
use crate::game::{ControlProfile, GameSpec};
use crate::mesh::{inner_product, l2_norm, GridFunction};

pub const DEFAULT_DELTA: f64 = 1e-8;

/// Free unknowns up to which the reduced operator is assembled densely.
pub const DENSE_LIMIT: usize = 1000;

/// `1e-7 (1 + ‖û*‖_∞)`.
pub fn default_eps_act(result: &EquilibriumResult) -> f64 {
    1e-7 * (1.0 + result.u_hat_star.max_abs())
}

/// Node-wise free/fixed flags per player.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSetMask {
    fixed: Vec<Vec<bool>>,
    eps_act: f64,
}

impl ActiveSetMask {
    /// Fixes exactly the nodes where `|û*_k| > eps_act`.
    pub fn from_residual(u_hat_star: &ControlProfile, eps_act: f64) -> Result<Self> {
        if !(eps_act > 0.0 && eps_act.is_finite()) {
            return Err(Error::InvalidSettings(format!(
                "eps_act must be positive, got {eps_act}"
            )));
        }
        let fixed = u_hat_star
            .iter()
            .map(|r| r.values().iter().map(|v| v.abs() > eps_act).collect())
            .collect();
        Ok(Self { fixed, eps_act })
    }

    pub fn eps_act(&self) -> f64 {
        self.eps_act
    }

    pub fn num_players(&self) -> usize {
        self.fixed.len()
    }

    pub fn is_fixed(&self, k: usize, node: usize) -> bool {
        self.fixed[k][node]
    }

    pub fn fixed_count(&self, k: usize) -> usize {
        self.fixed[k].iter().filter(|&&f| f).count()
    }

    pub fn free_count(&self, k: usize) -> usize {
        self.fixed[k].len() - self.fixed_count(k)
    }

    pub fn total_free(&self) -> usize {
        (0..self.num_players()).map(|k| self.free_count(k)).sum()
    }

    /// Zeroes a profile on fixed nodes.
    pub fn apply(&self, v: &ControlProfile) -> ControlProfile {
        ControlProfile::new(
            v.iter()
                .zip(&self.fixed)
                .map(|(vk, fk)| {
                    let values = vk
                        .values()
                        .iter()
                        .zip(fk)
                        .map(|(&x, &f)| if f { 0.0 } else { x })
                        .collect();
                    GridFunction::from_raw(vk.grid(), values)
                })
                .collect(),
        )
    }

    /// Flat indices `k * n + node` of the free unknowns.
    fn free_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (k, fk) in self.fixed.iter().enumerate() {
            let n = fk.len();
            out.extend(fk.iter().enumerate().filter(|(_, &f)| !f).map(|(i, _)| k * n + i));
        }
        out
    }
}

pub fn critical_subspace(result: &EquilibriumResult, eps_act: f64) -> Result<ActiveSetMask> {
    ActiveSetMask::from_residual(&result.u_hat_star, eps_act)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    FullyStable,
    NotCertified,
    Indefinite,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::FullyStable => "fully-stable",
            Verdict::NotCertified => "not-certified",
            Verdict::Indefinite => "indefinite",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenMethod {
    /// Dense below [`DENSE_LIMIT`] free unknowns, Lanczos above.
    Auto,
    Dense,
    Lanczos,
}

impl fmt::Display for EigenMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EigenMethod::Auto => "auto",
            EigenMethod::Dense => "dense",
            EigenMethod::Lanczos => "lanczos",
        })
    }
}

impl FromStr for EigenMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(EigenMethod::Auto),
            "dense" => Ok(EigenMethod::Dense),
            "lanczos" => Ok(EigenMethod::Lanczos),
            _ => Err(Error::InvalidSettings(format!("unknown eigen method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifySettings {
    pub delta: f64,
    /// Activity threshold; [`default_eps_act`] when `None`.
    pub eps_act: Option<f64>,
    pub method: EigenMethod,
    pub lanczos_max_steps: usize,
    pub lanczos_tolerance: f64,
}

impl Default for CertifySettings {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            eps_act: None,
            method: EigenMethod::Auto,
            lanczos_max_steps: 500,
            lanczos_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StabilityCertificate {
    pub mask: ActiveSetMask,
    /// `+∞` when the free set is empty.
    pub lambda_min: f64,
    pub delta: f64,
    pub verdict: Verdict,
    /// Unit-norm eigenvector for `lambda_min`, zero on fixed nodes (and
    /// identically zero when there are no free nodes).
    pub eigvector: ControlProfile,
    pub method: EigenMethod,
    pub diagnostic: Option<String>,
}

impl StabilityCertificate {
    pub fn is_fully_stable(&self) -> bool {
        self.verdict == Verdict::FullyStable
    }
}

/// `v ↦ P ½(F'_u + F'_uᵀ) P v` with `P` the mask projection.
pub fn reduced_apply(
    spec: &GameSpec,
    pt: &EquilibriumPoint,
    mask: &ActiveSetMask,
    v: &ControlProfile,
) -> Result<ControlProfile> {
    Ok(mask.apply(&symmetrized_apply(spec, pt, &mask.apply(v))?))
}

pub fn certify(spec: &GameSpec, result: &EquilibriumResult, delta: f64, eps_act: f64) -> Result<StabilityCertificate> {
    let settings = CertifySettings {
        delta,
        eps_act: Some(eps_act),
        ..CertifySettings::default()
    };
    certify_with(spec, result, &settings)
}

pub fn certify_with(
    spec: &GameSpec,
    result: &EquilibriumResult,
    settings: &CertifySettings,
) -> Result<StabilityCertificate> {
    if !result.converged {
        return Err(Error::NotConverged {
            residual: result.residual,
        });
    }
    if !(settings.delta > 0.0 && settings.delta.is_finite()) {
        return Err(Error::InvalidSettings(format!(
            "delta must be positive, got {}",
            settings.delta
        )));
    }
    let eps_act = settings.eps_act.unwrap_or_else(|| default_eps_act(result));
    let mask = critical_subspace(result, eps_act)?;
    let free = mask.free_indices();
    if free.is_empty() {
        return Ok(StabilityCertificate {
            mask,
            lambda_min: f64::INFINITY,
            delta: settings.delta,
            verdict: Verdict::FullyStable,
            eigvector: ControlProfile::zeros(spec),
            method: settings.method,
            diagnostic: Some("free set is empty".into()),
        });
    }
    let method = match settings.method {
        EigenMethod::Auto if free.len() <= DENSE_LIMIT => EigenMethod::Dense,
        EigenMethod::Auto => EigenMethod::Lanczos,
        m => m,
    };
    let n = spec.grid().num_interior();
    let m = spec.num_players();
    let pt = &result.point;
    let apply_flat = |x: &[f64]| -> Result<Vec<f64>> {
        let v = unflatten(spec, x);
        Ok(flatten(&reduced_apply(spec, pt, &mask, &v)?))
    };
    let (lambda_min, vector, diagnostic) = match method {
        EigenMethod::Dense => {
            let columns = free
                .par_iter()
                .map(|&c| {
                    let mut e = vec![0.0; n * m];
                    e[c] = 1.0;
                    apply_flat(&e).map(|col| free.iter().map(|&r| col[r]).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            let nf = free.len();
            let a = DMatrix::from_fn(nf, nf, |i, j| 0.5 * (columns[j][i] + columns[i][j]));
            let (lambda, s) = smallest_eigenpair(a);
            let mut x = vec![0.0; n * m];
            for (i, &idx) in free.iter().enumerate() {
                x[idx] = s[i];
            }
            (lambda, x, None)
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let mut start = vec![0.0; n * m];
            for &idx in &free {
                start[idx] = rng.random_range(-1.0..1.0);
            }
            let out = lanczos_smallest(
                apply_flat,
                start,
                settings.lanczos_max_steps,
                settings.lanczos_tolerance,
            )?;
            let diag = (!out.converged).then(|| {
                format!(
                    "lanczos stopped after {} steps with residual {:e}",
                    out.steps, out.residual
                )
            });
            (out.value, out.vector, diag)
        }
    };
    let eigvector = unflatten(spec, &vector);
    let norm = eigvector.norm();
    let eigvector = if norm > 0.0 {
        eigvector.scale(1.0 / norm)
    } else {
        eigvector
    };
    let verdict = if diagnostic.is_some() && lambda_min >= 0.0 {
        Verdict::NotCertified
    } else if lambda_min < 0.0 {
        Verdict::Indefinite
    } else if lambda_min >= settings.delta {
        Verdict::FullyStable
    } else {
        Verdict::NotCertified
    };
    Ok(StabilityCertificate {
        mask,
        lambda_min,
        delta: settings.delta,
        verdict,
        eigvector,
        method,
        diagnostic,
    })
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

fn smallest_eigenpair(a: DMatrix<f64>) -> (f64, Vec<f64>) {
    let eig = SymmetricEigen::new(a);
    let (i, &lambda) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty matrix");
    (lambda, eig.eigenvectors.column(i).iter().copied().collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) struct LanczosOutcome {
    pub value: f64,
    pub vector: Vec<f64>,
    pub residual: f64,
    pub steps: usize,
    pub converged: bool,
}

/// Lanczos with full reorthogonalization for the smallest eigenpair of a
/// symmetric operator. Convergence is declared when the Ritz residual
/// `β_j |s_j|` drops below `tol` times the largest Ritz value magnitude, or
/// when the Krylov space becomes invariant.
pub(crate) fn lanczos_smallest(
    apply: impl Fn(&[f64]) -> Result<Vec<f64>>,
    start: Vec<f64>,
    max_steps: usize,
    tol: f64,
) -> Result<LanczosOutcome> {
    let norm = dot(&start, &start).sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidSettings("lanczos start vector is zero".into()));
    }
    let mut basis: Vec<Vec<f64>> = vec![start.iter().map(|x| x / norm).collect()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    for j in 0..max_steps {
        let mut w = apply(&basis[j])?;
        let alpha = dot(&basis[j], &w);
        alphas.push(alpha);
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= c * qi);
            }
        }
        let beta = dot(&w, &w).sqrt();
        let last = j + 1 == max_steps;
        let scale = alphas
            .iter()
            .map(|a| a.abs())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let invariant = beta <= 1e-14 * scale || basis.len() == start.len();
        if j < 50 || j % 5 == 4 || invariant || last {
            let k = alphas.len();
            let t = DMatrix::from_fn(k, k, |r, c| {
                if r == c {
                    alphas[r]
                } else if r + 1 == c {
                    betas[r]
                } else if c + 1 == r {
                    betas[c]
                } else {
                    0.0
                }
            });
            let eig = SymmetricEigen::new(t);
            let theta_scale = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let (lambda, s) = {
                let (i, &l) = eig
                    .eigenvalues
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .expect("non-empty tridiagonal");
                (l, eig.eigenvectors.column(i).iter().copied().collect::<Vec<_>>())
            };
            let residual = if invariant { 0.0 } else { beta * s[k - 1].abs() };
            let converged = invariant || residual <= tol * theta_scale.max(f64::MIN_POSITIVE);
            if converged || last {
                let value = lambda;
                let mut vector = vec![0.0; start.len()];
                for (q, si) in basis.iter().zip(&s) {
                    vector.iter_mut().zip(q).for_each(|(v, qi)| *v += si * qi);
                }
                return Ok(LanczosOutcome {
                    value,
                    vector,
                    residual,
                    steps: j + 1,
                    converged,
                });
            }
        }
        betas.push(beta);
        basis.push(w.iter().map(|x| x / beta).collect());
    }
    Err(Error::InvalidSettings("lanczos needs at least one step".into()))
}

/// Outcome of the sampled local-Nash test.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalNashReport {
    pub samples: usize,
    pub radius: f64,
    pub violations: Vec<usize>,
    /// Smallest observed `cost(v) − cost(ū)` per player (tilt included).
    pub min_gain: Vec<f64>,
}

impl LocalNashReport {
    pub fn total_violations(&self) -> usize {
        self.violations.iter().sum()
    }
}

/// Samples feasible unilateral deviations within `radius` of `ū_k` and
/// counts those that lower the player's tilted cost by more than
/// `1e-10 (1 + |cost|)`.
pub fn verify_local_nash(
    spec: &GameSpec,
    result: &EquilibriumResult,
    certificate: &StabilityCertificate,
    samples: usize,
    radius: f64,
    seed: u64,
) -> Result<LocalNashReport> {
    if !certificate.is_fully_stable() {
        return Err(Error::InvalidSettings(format!(
            "local Nash verification needs a fully-stable certificate, got {}",
            certificate.verdict
        )));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::InvalidSettings(format!(
            "radius must be non-negative, got {radius}"
        )));
    }
    let e = result.perturbation();
    let t = &result.tilt;
    let ubar = &result.u_bar;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = vec![0; spec.num_players()];
    let mut min_gain = vec![f64::INFINITY; spec.num_players()];
    for k in 0..spec.num_players() {
        // same evaluation path as the samples, so a zero move gives a zero gain
        let base = spec.cost(k, ubar, e, t)?;
        let slack = 1e-10 * (1.0 + base.abs());
        for _ in 0..samples {
            let d = GridFunction::from_fn(spec.grid(), |_| rng.random_range(-1.0..1.0));
            let length = radius * rng.random_range(0.0..1.0);
            let norm = l2_norm(&d);
            let d = if norm > 0.0 { d.scale(length / norm) } else { d };
            let mut v = ubar.clone();
            v.set(k, spec.project_player(k, e, &(ubar.get(k) + &d)));
            let gain = spec.cost(k, &v, e, t)? - base;
            min_gain[k] = min_gain[k].min(gain);
            if gain < -slack {
                violations[k] += 1;
            }
        }
    }
    Ok(LocalNashReport {
        samples,
        radius,
        violations,
        min_gain,
    })
}

/// Cost change of one player moved along its own component of the witness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WitnessProbe {
    pub player: usize,
    pub step: f64,
    pub actual: f64,
    /// Second-order Taylor model `s ⟨F_k − u*_k, v_k⟩ + ½ s² ⟨H_kk v_k, v_k⟩`.
    pub predicted: f64,
}

/// Moves each player with a nonzero witness component by `±step · v_k`
/// (others frozen) and compares the cost change with its quadratic model.
pub fn probe_witness(
    spec: &GameSpec,
    result: &EquilibriumResult,
    certificate: &StabilityCertificate,
    steps: &[f64],
) -> Result<Vec<WitnessProbe>> {
    let e = result.perturbation();
    let t = &result.tilt;
    let ubar = &result.u_bar;
    let pt = &result.point;
    let grad = pseudo_gradient(spec, pt);
    let mut out = Vec::new();
    for k in 0..spec.num_players() {
        let vk = certificate.eigvector.get(k);
        if vk.max_abs() == 0.0 {
            continue;
        }
        let base = spec.cost(k, ubar, e, t)?;
        let slope = inner_product(&(grad.get(k) - t.get(k)), vk)?;
        let curvature = inner_product(&hessian_block_apply(spec, pt, k, k, vk)?, vk)?;
        for &s in steps {
            let mut v = ubar.clone();
            v.set(k, spec.project_player(k, e, &ubar.get(k).axpy(s, vk)));
            out.push(WitnessProbe {
                player: k,
                step: s,
                actual: spec.cost(k, &v, e, t)? - base,
                predicted: s * slope + 0.5 * s * s * curvature,
            });
        }
    }
    Ok(out)
}
