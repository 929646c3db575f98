//! Derivatives of the player costs: reduced gradients via adjoints, the
//! pseudo-gradient `F(u, e)`, Hessian block actions and the quadratic form
//! `Q(h) = ⟨F'_u h, h⟩ = Q1(h) + Q2(h)`.
//!
//! With `S = (A + diag(∂f/∂y(·, y)))⁻¹` and the per-player weight
//! `W_k = ∂²L_k/∂y² − φ_k ∂²f/∂y²`, the Hessian blocks are
//!
//! ```text
//! H_kj h = B_k S (W_k S (B_j h)) + [k = j] ζ_k h
//! ```
//!
//! so every block action costs two symmetric solves and nothing needs the
//! second-order state explicitly.

use crate::error::Result;
use crate::game::{ControlProfile, GameSpec, Perturbation, TiltVector};
use crate::mesh::{inner_product, GridFunction};
use crate::pde::conjugate_gradient;

/// State, adjoints and second-order weights frozen at a profile `(u, e)`.
#[derive(Debug, Clone)]
pub struct EquilibriumPoint {
    pub u: ControlProfile,
    pub e: Perturbation,
    pub y: GridFunction,
    pub phi: Vec<GridFunction>,
    shift: Vec<f64>,
    weights: Vec<GridFunction>,
}

impl EquilibriumPoint {
    pub fn evaluate(spec: &GameSpec, u: &ControlProfile, e: &Perturbation) -> Result<Self> {
        let y = spec.state(u, e)?;
        Self::with_state(spec, u, e, y)
    }

    /// Builds the point around an already converged state.
    pub fn with_state(spec: &GameSpec, u: &ControlProfile, e: &Perturbation, y: GridFunction) -> Result<Self> {
        let eq = spec.state_equation();
        let lin = eq.linearize(&y)?;
        let curvature = GridFunction::from_raw(spec.grid(), lin.curvature().to_vec());
        let mut phi = Vec::with_capacity(spec.num_players());
        let mut weights = Vec::with_capacity(spec.num_players());
        for (k, p) in spec.players().iter().enumerate() {
            let source = &p.integrand.first(&y, &p.yd)? + &e.players[k].e_j;
            let phi_k = lin.solve_adjoint(&source)?;
            let w = p
                .integrand
                .second(&y, &p.yd)?
                .zip_map(&phi_k.hadamard(&curvature), |a, b| a - b);
            phi.push(phi_k);
            weights.push(w);
        }
        let shift = lin.shift().to_vec();
        Ok(Self {
            u: u.clone(),
            e: e.clone(),
            y,
            phi,
            shift,
            weights,
        })
    }

    /// `W_k = ∂²L_k/∂y² − φ_k ∂²f/∂y²` at the frozen state.
    pub fn weight(&self, k: usize) -> &GridFunction {
        &self.weights[k]
    }

    /// Applies `S = (A + diag(∂f/∂y))⁻¹`.
    pub fn solve(&self, spec: &GameSpec, v: &GridFunction) -> Result<GridFunction> {
        let eq = spec.state_equation();
        let x = conjugate_gradient(eq.op.matrix(), &self.shift, v.values(), &eq.linear)?;
        Ok(GridFunction::from_raw(spec.grid(), x))
    }
}

/// `∇_{u_k} 𝓙_k = ζ_k u_k + B_k φ_k`.
pub fn gradient(spec: &GameSpec, pt: &EquilibriumPoint, k: usize) -> GridFunction {
    let p = &spec.players()[k];
    &p.zeta.hadamard(pt.u.get(k)) + &p.b.hadamard(&pt.phi[k])
}

/// `F(u, e) = (∇_{u_1} 𝓙_1, …, ∇_{u_m} 𝓙_m)`.
pub fn pseudo_gradient(spec: &GameSpec, pt: &EquilibriumPoint) -> ControlProfile {
    ControlProfile::new((0..spec.num_players()).map(|k| gradient(spec, pt, k)).collect())
}

/// Riesz representative of `h_k ↦ ∇²_{u_k u_j} 𝓙_k (h_k, h_j)`.
pub fn hessian_block_apply(
    spec: &GameSpec,
    pt: &EquilibriumPoint,
    k: usize,
    j: usize,
    h_j: &GridFunction,
) -> Result<GridFunction> {
    let players = spec.players();
    let z = pt.solve(spec, &players[j].b.hadamard(h_j))?;
    let q = pt.solve(spec, &pt.weights[k].hadamard(&z))?;
    let mut out = players[k].b.hadamard(&q);
    if k == j {
        out = &out + &players[k].zeta.hadamard(h_j);
    }
    Ok(out)
}

/// Adjoint of the block action: `H_kjᵀ h = B_j S (W_k S (B_k h)) + [k = j] ζ_k h`.
pub fn hessian_block_apply_transpose(
    spec: &GameSpec,
    pt: &EquilibriumPoint,
    k: usize,
    j: usize,
    h: &GridFunction,
) -> Result<GridFunction> {
    let players = spec.players();
    let z = pt.solve(spec, &players[k].b.hadamard(h))?;
    let q = pt.solve(spec, &pt.weights[k].hadamard(&z))?;
    let mut out = players[j].b.hadamard(&q);
    if k == j {
        out = &out + &players[k].zeta.hadamard(h);
    }
    Ok(out)
}

/// `F'_u h`, row `k` being `Σ_j H_kj h_j`; costs `m + 1` solves.
pub fn jacobian_apply(spec: &GameSpec, pt: &EquilibriumPoint, h: &ControlProfile) -> Result<ControlProfile> {
    let players = spec.players();
    let mut source = GridFunction::zeros(spec.grid());
    for (p, hj) in players.iter().zip(h.iter()) {
        source = &source + &p.b.hadamard(hj);
    }
    let z = pt.solve(spec, &source)?;
    let rows = players
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let q = pt.solve(spec, &pt.weights[k].hadamard(&z))?;
            Ok(&p.b.hadamard(&q) + &p.zeta.hadamard(h.get(k)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ControlProfile::new(rows))
}

/// `(F'_u)ᵀ h`, row `j` being `Σ_k H_kjᵀ h_k`; costs `m + 1` solves.
pub fn jacobian_transpose_apply(spec: &GameSpec, pt: &EquilibriumPoint, h: &ControlProfile) -> Result<ControlProfile> {
    let players = spec.players();
    let mut source = GridFunction::zeros(spec.grid());
    for (k, (p, hk)) in players.iter().zip(h.iter()).enumerate() {
        let zk = pt.solve(spec, &p.b.hadamard(hk))?;
        source = &source + &pt.weights[k].hadamard(&zk);
    }
    let q = pt.solve(spec, &source)?;
    Ok(ControlProfile::new(
        players
            .iter()
            .enumerate()
            .map(|(j, p)| &p.b.hadamard(&q) + &p.zeta.hadamard(h.get(j)))
            .collect(),
    ))
}

/// `½ (F'_u + F'_uᵀ) h`.
pub fn symmetrized_apply(spec: &GameSpec, pt: &EquilibriumPoint, h: &ControlProfile) -> Result<ControlProfile> {
    let a = jacobian_apply(spec, pt, h)?;
    let b = jacobian_transpose_apply(spec, pt, h)?;
    Ok(a.add(&b).scale(0.5))
}

/// `Q(h) = Σ_k Σ_j (H_kj h_j, h_k)` from individual block actions.
pub fn quadratic_form(spec: &GameSpec, pt: &EquilibriumPoint, h: &ControlProfile) -> Result<f64> {
    let m = spec.num_players();
    let mut total = 0.0;
    for k in 0..m {
        for j in 0..m {
            total += inner_product(&hessian_block_apply(spec, pt, k, j, h.get(j))?, h.get(k))?;
        }
    }
    Ok(total)
}

/// The Legendre split `Q = Q1 + Q2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticSplit {
    /// State-dependent part `Σ_k ∫ W_k z_{h_k} (Σ_j z_{h_j})`.
    pub q1: f64,
    /// Control-cost part `Σ_k ∫ ζ_k h_k²`.
    pub q2: f64,
}

impl QuadraticSplit {
    pub fn total(&self) -> f64 {
        self.q1 + self.q2
    }
}

/// Evaluates `Q1` through the linearized states and `Q2` directly, without
/// going through the block actions.
pub fn quadratic_split(spec: &GameSpec, pt: &EquilibriumPoint, h: &ControlProfile) -> Result<QuadraticSplit> {
    let players = spec.players();
    let zs = players
        .iter()
        .zip(h.iter())
        .map(|(p, hk)| pt.solve(spec, &p.b.hadamard(hk)))
        .collect::<Result<Vec<_>>>()?;
    let mut z_sum = GridFunction::zeros(spec.grid());
    for z in &zs {
        z_sum = &z_sum + z;
    }
    let mut q1 = 0.0;
    for (k, zk) in zs.iter().enumerate() {
        q1 += inner_product(&pt.weights[k].hadamard(zk), &z_sum)?;
    }
    Ok(QuadraticSplit {
        q1,
        q2: control_part(spec, h)?,
    })
}

/// `Q2(h) = Σ_k ∫ ζ_k h_k²`.
pub fn control_part(spec: &GameSpec, h: &ControlProfile) -> Result<f64> {
    spec.players()
        .iter()
        .zip(h.iter())
        .map(|(p, hk)| inner_product(&p.zeta.hadamard(hk), hk))
        .sum()
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Relative error between the central difference of `J_k` along `h` (in
/// player `k`'s control) and `(∇_{u_k} J_k, h)`.
pub fn gradient_fd_error(
    spec: &GameSpec,
    u: &ControlProfile,
    e: &Perturbation,
    t: &TiltVector,
    k: usize,
    h: &GridFunction,
    eps: f64,
) -> Result<f64> {
    let pt = EquilibriumPoint::evaluate(spec, u, e)?;
    let exact = inner_product(&(&gradient(spec, &pt, k) - t.get(k)), h)?;
    let mut up = u.clone();
    up.set(k, u.get(k).axpy(eps, h));
    let mut um = u.clone();
    um.set(k, u.get(k).axpy(-eps, h));
    let fd = (spec.cost(k, &up, e, t)? - spec.cost(k, &um, e, t)?) / (2.0 * eps);
    Ok(relative_error(fd, exact))
}

/// Error of `(H_kj h_j, h_k)` against a central difference of the gradient,
/// normalized by `max(|exact|, ‖H_kj h_j‖ ‖h_k‖)`.
#[allow(clippy::too_many_arguments)]
pub fn hessian_fd_error(
    spec: &GameSpec,
    u: &ControlProfile,
    e: &Perturbation,
    k: usize,
    j: usize,
    h_j: &GridFunction,
    h_k: &GridFunction,
    eps: f64,
) -> Result<f64> {
    let pt = EquilibriumPoint::evaluate(spec, u, e)?;
    let action = hessian_block_apply(spec, &pt, k, j, h_j)?;
    let exact = inner_product(&action, h_k)?;
    let grad_at = |s: f64| -> Result<f64> {
        let mut v = u.clone();
        v.set(j, u.get(j).axpy(s, h_j));
        let p = EquilibriumPoint::evaluate(spec, &v, e)?;
        inner_product(&gradient(spec, &p, k), h_k)
    };
    let fd = (grad_at(eps)? - grad_at(-eps)?) / (2.0 * eps);
    let scale = exact
        .abs()
        .max(crate::mesh::l2_norm(&action) * crate::mesh::l2_norm(h_k));
    Ok(if scale == 0.0 {
        (fd - exact).abs()
    } else {
        (fd - exact).abs() / scale
    })
}

/// Relative mismatch in the duality `(φ_k, v) = (∂L_k/∂y + e_kJ, S v)`.
pub fn adjoint_identity_error(spec: &GameSpec, pt: &EquilibriumPoint, k: usize, v: &GridFunction) -> Result<f64> {
    let p = &spec.players()[k];
    let source = &p.integrand.first(&pt.y, &p.yd)? + &pt.e.players[k].e_j;
    let lhs = inner_product(&pt.phi[k], v)?;
    let rhs = inner_product(&source, &pt.solve(spec, v)?)?;
    Ok(relative_error(lhs, rhs))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::game::tests::{simple_game, simple_player};
    use crate::game::{GameSpec, PlayerShift};
    use crate::mesh::{l2_norm, Grid};
    use crate::pde::EllipticOperator;
    use nalgebra::{DMatrix, DVector};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_profile(spec: &GameSpec, rng: &mut ChaCha8Rng, scale: f64) -> ControlProfile {
        ControlProfile::new(
            (0..spec.num_players())
                .map(|_| GridFunction::from_fn(spec.grid(), |_| scale * rng.random_range(-1.0..1.0)))
                .collect(),
        )
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    /// Two-player semilinear game with non-trivial data everywhere.
    fn rich_game(points: usize) -> (GameSpec, Perturbation) {
        let grid = Arc::new(Grid::unit_interval(points).unwrap());
        let mut p1 = simple_player(&grid, "0.5*(y - yd)^2 + 0.1*y^4", 1.0, (-2.0, 2.0));
        p1.yd = GridFunction::from_fn(&grid, |x| (3.0 * x[0]).sin());
        p1.b = GridFunction::from_fn(&grid, |x| 1.0 + x[0]);
        let mut p2 = simple_player(&grid, "exp(0.3*y) - y*yd", 0.5, (-2.0, 2.0));
        p2.yd = GridFunction::from_fn(&grid, |x| x[0]);
        p2.zeta = GridFunction::from_fn(&grid, |x| 0.5 + x[0] * x[0]);
        p2.b = GridFunction::from_fn(&grid, |x| 2.0 - x[0]);
        let spec = GameSpec::new(
            EllipticOperator::laplacian(&grid).unwrap(),
            Expr::parse("y^3 + tanh(y)").unwrap(),
            vec![p1, p2],
            10.0,
        )
        .unwrap();
        let shifts = (0..2)
            .map(|k| {
                let mut s = PlayerShift::zero(&grid);
                s.e_j = GridFunction::from_fn(&grid, |x| 0.3 * (k as f64 + 1.0) * x[0].cos());
                s
            })
            .collect();
        let e_y = GridFunction::from_fn(&grid, |x| 2.0 * x[0]);
        let e = Perturbation::new(&spec, e_y, shifts, 1e-6).unwrap();
        (spec, e)
    }

    fn base_profile(spec: &GameSpec) -> ControlProfile {
        ControlProfile::new(vec![
            GridFunction::from_fn(spec.grid(), |x| 5.0 * (2.0 * x[0]).sin()),
            GridFunction::from_fn(spec.grid(), |x| 3.0 - 4.0 * x[0]),
        ])
    }

    #[test]
    fn gradient_without_tracking_is_control_term() {
        let spec = simple_game(17, "y^3", vec![("0", 2.0)]);
        let e = Perturbation::zero(&spec);
        let u = ControlProfile::new(vec![GridFunction::from_fn(spec.grid(), |x| x[0])]);
        let pt = EquilibriumPoint::evaluate(&spec, &u, &e).unwrap();
        assert_eq!(pt.phi[0].max_abs(), 0.0);
        assert_eq!(gradient(&spec, &pt, 0), u.get(0).scale(2.0));
        assert_eq!(pseudo_gradient(&spec, &pt).get(0), &gradient(&spec, &pt, 0));
    }

    #[test]
    fn pseudo_gradient_of_zero_integrands() {
        let spec = simple_game(17, "0", vec![("0", 2.0), ("0", 3.0)]);
        let e = Perturbation::zero(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_profile(&spec, &mut rng, 1.0);
        let pt = EquilibriumPoint::evaluate(&spec, &u, &e).unwrap();
        let f = pseudo_gradient(&spec, &pt);
        assert_eq!(f.get(0), &u.get(0).scale(2.0));
        assert_eq!(f.get(1), &u.get(1).scale(3.0));
    }

    #[test]
    fn tracking_at_target_has_zero_adjoint() {
        let grid = Arc::new(Grid::unit_interval(33).unwrap());
        let mut p = simple_player(&grid, "0.5*(y - yd)^2", 1.0, (-5.0, 5.0));
        let u = GridFunction::from_fn(&grid, |x| (2.0 * x[0]).cos());
        let op = EllipticOperator::laplacian(&grid).unwrap();
        // choose the target to be the state produced by u
        p.yd = crate::pde::StateEquation::new(op.clone(), crate::pde::Nonlinearity::zero())
            .solve_state(&u)
            .unwrap();
        let spec = GameSpec::new(op, Expr::num(0.0), vec![p], 10.0).unwrap();
        let e = Perturbation::zero(&spec);
        let pt = EquilibriumPoint::evaluate(&spec, &ControlProfile::new(vec![u.clone()]), &e).unwrap();
        assert!(pt.phi[0].max_abs() <= 1e-13);
        assert!((&gradient(&spec, &pt, 0) - &u).max_abs() <= 1e-13);
    }

    #[test]
    fn gradient_matches_cost_differences() {
        let (spec, e) = rich_game(33);
        let u = base_profile(&spec);
        let t = ControlProfile::zeros(&spec);
        let pt = EquilibriumPoint::evaluate(&spec, &u, &e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = 1e-5;
        for k in 0..2 {
            let g = gradient(&spec, &pt, k);
            for _ in 0..5 {
                let h = GridFunction::from_fn(spec.grid(), |_| rng.random_range(-1.0..1.0));
                let mut up = u.clone();
                up.set(k, u.get(k).axpy(eps, &h));
                let mut um = u.clone();
                um.set(k, u.get(k).axpy(-eps, &h));
                let fd = (spec.cost(k, &up, &e, &t).unwrap() - spec.cost(k, &um, &e, &t).unwrap()) / (2.0 * eps);
                let exact = inner_product(&g, &h).unwrap();
                assert!(rel(fd, exact) <= 1e-6, "player {k}: {fd} vs {exact}");
            }
        }
    }

    #[test]
    fn hessian_blocks_without_state_cost() {
        let spec = simple_game(17, "0", vec![("0", 2.0), ("0", 3.0)]);
        let e = Perturbation::zero(&spec);
        let u = ControlProfile::zeros(&spec);
        let pt = EquilibriumPoint::evaluate(&spec, &u, &e).unwrap();
        let h = GridFunction::from_fn(spec.grid(), |x| x[0] - 0.5);
        assert_eq!(hessian_block_apply(&spec, &pt, 1, 1, &h).unwrap(), h.scale(3.0));
        assert_eq!(hessian_block_apply(&spec, &pt, 0, 1, &h).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn hessian_blocks_match_gradient_differences() {
        let (spec, e) = rich_game(33);
        let u = base_profile(&spec);
        let pt = EquilibriumPoint::evaluate(&spec, &u, &e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let eps = 1e-5;
        for k in 0..2 {
            for j in 0..2 {
                let hk = GridFunction::from_fn(spec.grid(), |_| rng.random_range(-1.0..1.0));
                let hj = GridFunction::from_fn(spec.grid(), |_| rng.random_range(-1.0..1.0));
                let grad_at = |s: f64| {
                    let mut v = u.clone();
                    v.set(j, u.get(j).axpy(s, &hj));
                    let p = EquilibriumPoint::evaluate(&spec, &v, &e).unwrap();
                    inner_product(&gradient(&spec, &p, k), &hk).unwrap()
                };
                let fd = (grad_at(eps) - grad_at(-eps)) / (2.0 * eps);
                let action = hessian_block_apply(&spec, &pt, k, j, &hj).unwrap();
                let exact = inner_product(&action, &hk).unwrap();
                // normalized by the Cauchy-Schwarz scale of the pairing
                let scale = exact.abs().max(l2_norm(&action) * l2_norm(&hk));
                assert!((fd - exact).abs() <= 1e-5 * scale, "block ({k},{j}): {fd} vs {exact}");
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_block_action() {
        let (spec, e) = rich_game(33);
        let pt = EquilibriumPoint::evaluate(&spec, &base_profile(&spec), &e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for k in 0..2 {
            for j in 0..2 {
                let a = GridFunction::from_fn(spec.grid(), |_| rng.random_range(-1.0..1.0));
                let b = GridFunction::from_fn(spec.grid(), |_| rng.random_range(-1.0..1.0));
                let lhs = inner_product(&hessian_block_apply(&spec, &pt, k, j, &a).unwrap(), &b).unwrap();
                let rhs = inner_product(&a, &hessian_block_apply_transpose(&spec, &pt, k, j, &b).unwrap()).unwrap();
                assert!(rel(lhs, rhs) <= 1e-10);
            }
        }
        let h = random_profile(&spec, &mut rng, 1.0);
        let g = random_profile(&spec, &mut rng, 1.0);
        let lhs = jacobian_apply(&spec, &pt, &h).unwrap().inner(&g).unwrap();
        let rhs = h.inner(&jacobian_transpose_apply(&spec, &pt, &g).unwrap()).unwrap();
        assert!(rel(lhs, rhs) <= 1e-10);
    }

    #[test]
    fn diagonal_blocks_are_symmetric() {
        let (spec, e) = rich_game(33);
        let pt = EquilibriumPoint::evaluate(&spec, &base_profile(&spec), &e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for k in 0..2 {
            let h = GridFunction::from_fn(spec.grid(), |_| rng.random_range(-1.0..1.0));
            let g = GridFunction::from_fn(spec.grid(), |_| rng.random_range(-1.0..1.0));
            let a = inner_product(&hessian_block_apply(&spec, &pt, k, k, &h).unwrap(), &g).unwrap();
            let b = inner_product(&hessian_block_apply(&spec, &pt, k, k, &g).unwrap(), &h).unwrap();
            assert!(rel(a, b) <= 1e-10);
        }
    }

    #[test]
    fn jacobian_rows_are_block_sums() {
        let (spec, e) = rich_game(17);
        let pt = EquilibriumPoint::evaluate(&spec, &base_profile(&spec), &e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = random_profile(&spec, &mut rng, 1.0);
        let jh = jacobian_apply(&spec, &pt, &h).unwrap();
        for k in 0..2 {
            let row = &hessian_block_apply(&spec, &pt, k, 0, h.get(0)).unwrap()
                + &hessian_block_apply(&spec, &pt, k, 1, h.get(1)).unwrap();
            assert!((&row - jh.get(k)).max_abs() <= 1e-10 * row.max_abs());
        }
    }

    #[test]
    fn zero_direction_has_zero_form() {
        let (spec, e) = rich_game(17);
        let pt = EquilibriumPoint::evaluate(&spec, &base_profile(&spec), &e).unwrap();
        assert_eq!(quadratic_form(&spec, &pt, &ControlProfile::zeros(&spec)).unwrap(), 0.0);
    }

    #[test]
    fn split_matches_block_evaluation() {
        let (spec, e) = rich_game(33);
        let pt = EquilibriumPoint::evaluate(&spec, &base_profile(&spec), &e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let h = random_profile(&spec, &mut rng, 1.0);
            let q = quadratic_form(&spec, &pt, &h).unwrap();
            let split = quadratic_split(&spec, &pt, &h).unwrap();
            assert!((q - split.q2 - split.q1).abs() <= 1e-10 * q.abs());
            assert!(split.q2 >= spec.min_zeta_floor() * h.norm().powi(2));
        }
    }

    /// Dense assembly of `F'_u` in the nodal basis.
    pub(crate) fn dense_jacobian(spec: &GameSpec, pt: &EquilibriumPoint) -> DMatrix<f64> {
        let eq = spec.state_equation();
        let n = spec.grid().num_interior();
        let m = spec.num_players();
        let mut k_mat = eq.op.matrix().to_dense();
        let shift = eq.f.first(spec.grid(), pt.y.values()).unwrap();
        for i in 0..n {
            k_mat[(i, i)] += shift[i];
        }
        let s = k_mat.try_inverse().unwrap();
        let mut jac = DMatrix::zeros(n * m, n * m);
        for k in 0..m {
            for j in 0..m {
                let bk = DMatrix::from_diagonal(&DVector::from_column_slice(spec.players()[k].b.values()));
                let bj = DMatrix::from_diagonal(&DVector::from_column_slice(spec.players()[j].b.values()));
                let w = DMatrix::from_diagonal(&DVector::from_column_slice(pt.weight(k).values()));
                let mut block = &bk * &s * &w * &s * &bj;
                if k == j {
                    for i in 0..n {
                        block[(i, i)] += spec.players()[k].zeta.values()[i];
                    }
                }
                jac.view_mut((k * n, j * n), (n, n)).copy_from(&block);
            }
        }
        jac
    }

    #[test]
    fn matches_dense_assembly_on_linear_quadratic_game() {
        let grid = Arc::new(Grid::unit_interval(19).unwrap());
        let players = (0..2)
            .map(|k| {
                let mut p = simple_player(&grid, "0.5*(y - yd)^2", 0.5 + k as f64, (-1.0, 1.0));
                p.yd = GridFunction::from_fn(&grid, |x| (k as f64 + 1.0) * x[0]);
                p
            })
            .collect();
        let spec = GameSpec::new(
            EllipticOperator::laplacian(&grid).unwrap(),
            Expr::num(0.0),
            players,
            10.0,
        )
        .unwrap();
        assert_eq!(grid.num_interior(), 17);
        let e = Perturbation::zero(&spec);
        let pt = EquilibriumPoint::evaluate(&spec, &ControlProfile::zeros(&spec), &e).unwrap();
        let jac = dense_jacobian(&spec, &pt);
        let h_vol = grid.cell_volume();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..5 {
            let h = random_profile(&spec, &mut rng, 1.0);
            let flat = DVector::from_iterator(34, h.iter().flat_map(|c| c.values().to_vec()));
            let dense_q = h_vol * flat.dot(&(&jac * &flat));
            let q = quadratic_form(&spec, &pt, &h).unwrap();
            assert!(rel(q, dense_q) <= 1e-8);
            assert!(q >= 0.5 * h.norm().powi(2));
        }
    }

    #[test]
    fn state_part_is_spectrally_compact() {
        // 33-node reference instance: Q1 on a single player with L = ½y²
        let grid = Arc::new(Grid::unit_interval(35).unwrap());
        let p = simple_player(&grid, "0.5*y^2", 1.0, (-1.0, 1.0));
        let spec = GameSpec::new(
            EllipticOperator::laplacian(&grid).unwrap(),
            Expr::num(0.0),
            vec![p],
            10.0,
        )
        .unwrap();
        let pt = EquilibriumPoint::evaluate(&spec, &ControlProfile::zeros(&spec), &Perturbation::zero(&spec)).unwrap();
        let n = grid.num_interior();
        let mut q1 = dense_jacobian(&spec, &pt);
        for i in 0..n {
            q1[(i, i)] -= 1.0;
        }
        let q1 = 0.5 * (&q1 + q1.transpose());
        let mut eig: Vec<f64> = q1.symmetric_eigenvalues().iter().map(|v| v.abs()).collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let total: f64 = eig.iter().sum();
        let top: f64 = eig[..n.div_ceil(10)].iter().sum();
        assert!(top >= 0.99 * total, "top {top} of {total}");
    }

    #[test]
    fn control_part_coercivity() {
        let (spec, _) = rich_game(17);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..10 {
            let h = random_profile(&spec, &mut rng, 2.0);
            assert!(control_part(&spec, &h).unwrap() >= spec.min_zeta_floor() * h.norm().powi(2));
        }
    }

    #[test]
    fn public_check_helpers_agree_with_exact_derivatives() {
        let (spec, e) = rich_game(33);
        let u = base_profile(&spec);
        let t = ControlProfile::zeros(&spec);
        let pt = EquilibriumPoint::evaluate(&spec, &u, &e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for k in 0..2 {
            let h = GridFunction::from_fn(spec.grid(), |_| rng.random_range(-1.0..1.0));
            let g = GridFunction::from_fn(spec.grid(), |_| rng.random_range(-1.0..1.0));
            assert!(gradient_fd_error(&spec, &u, &e, &t, k, &h, 1e-5).unwrap() <= 1e-6);
            assert!(hessian_fd_error(&spec, &u, &e, k, 1 - k, &h, &g, 1e-5).unwrap() <= 1e-5);
            assert!(adjoint_identity_error(&spec, &pt, k, &h).unwrap() <= 1e-10);
        }
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 0.0), 1.0);
    }
}
