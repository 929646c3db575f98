//! Finite-difference elliptic operator and the state, linearized,
//! second-order and adjoint solves of the semilinear Dirichlet problem
//!
//! ```text
//! A y + f(x, y) = rhs   in Ω,    y = 0 on Γ.
//! ```
//!
//! Every linear system has the form `(A + diag(d)) z = b` with `A` the
//! symmetric positive definite stencil matrix and `d = ∂f/∂y(·, y) ≥ 0`, so
//! one Jacobi-preconditioned conjugate-gradient routine serves all of them.
//! Because `A` is symmetric the adjoint system uses the same matrix, which
//! makes the discrete duality `(φ, v) = (source, z_v)` hold up to the
//! linear-solver tolerance.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expr::{Expr, Point};
use crate::mesh::{dot, l2_norm, Grid, GridFunction};

/// Symmetric positive definite coefficient matrix `a_ij` (constant).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Self {
            a11: 1.0,
            a12: 0.0,
            a22: 1.0,
        }
    }
}

impl Coefficients {
    /// Ellipticity constant: smallest eigenvalue of `a_ij` on the active dimensions.
    pub fn ellipticity(&self, dim: usize) -> f64 {
        if dim == 1 {
            self.a11
        } else {
            let mean = 0.5 * (self.a11 + self.a22);
            let half_gap = 0.5 * (self.a11 - self.a22);
            mean - (half_gap * half_gap + self.a12 * self.a12).sqrt()
        }
    }
}

/// Compressed sparse row storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()]
            .iter()
            .position(|&c| c == j)
            .map_or(0.0, |p| self.vals[range.start + p])
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[p] * x[self.cols[p]];
            }
            *o = s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|i| {
                self.vals[self.row_ptr[i]..self.row_ptr[i + 1]]
                    .iter()
                    .map(|v| v.abs())
                    .sum()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.cols[p])] = self.vals[p];
            }
        }
        m
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (self.row_ptr[i]..self.row_ptr[i + 1]).all(|p| self.get(self.cols[p], i) == self.vals[p]))
    }
}

/// Second-order finite-difference discretization of
/// `-Σ ∂_i(a_ij ∂_j y)` on the interior nodes of a grid.
#[derive(Debug, Clone)]
pub struct EllipticOperator {
    grid: Arc<Grid>,
    coefficients: Coefficients,
    matrix: CsrMatrix,
}

impl EllipticOperator {
    pub fn laplacian(grid: &Arc<Grid>) -> Result<Self> {
        Self::new(grid, Coefficients::default())
    }

    pub fn new(grid: &Arc<Grid>, coefficients: Coefficients) -> Result<Self> {
        let Coefficients { a11, a12, a22 } = coefficients;
        if ![a11, a12, a22].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidSpec("operator coefficients must be finite".into()));
        }
        let lambda = coefficients.ellipticity(grid.dim());
        if lambda <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "operator coefficients are not uniformly elliptic (smallest eigenvalue {lambda})"
            )));
        }
        let matrix = assemble(grid, coefficients);
        Ok(Self {
            grid: Arc::clone(grid),
            coefficients,
            matrix,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn coefficients(&self) -> Coefficients {
        self.coefficients
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn apply(&self, y: &GridFunction) -> GridFunction {
        let mut out = vec![0.0; y.len()];
        self.matrix.matvec(y.values(), &mut out);
        GridFunction::from_raw(&self.grid, out)
    }
}

fn assemble(grid: &Grid, c: Coefficients) -> CsrMatrix {
    let shape = grid.interior_shape();
    let n = grid.num_interior();
    let h = grid.spacing();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);

    // Stencil as (offset, weight) pairs.
    let mut stencil: Vec<([isize; 2], f64)> = Vec::new();
    if grid.dim() == 1 {
        let w = c.a11 / (h[0] * h[0]);
        stencil.extend([([-1, 0], -w), ([0, 0], 2.0 * w), ([1, 0], -w)]);
    } else {
        let w1 = c.a11 / (h[0] * h[0]);
        let w2 = c.a22 / (h[1] * h[1]);
        let wm = c.a12 / (2.0 * h[0] * h[1]);
        stencil.extend([
            ([0, -1], -w2),
            ([-1, 0], -w1),
            ([0, 0], 2.0 * (w1 + w2)),
            ([1, 0], -w1),
            ([0, 1], -w2),
        ]);
        if c.a12 != 0.0 {
            stencil.extend([([-1, -1], -wm), ([1, -1], wm), ([-1, 1], wm), ([1, 1], -wm)]);
        }
    }
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(stencil.len());
    for i in 0..n {
        let mi = grid.multi_index(i);
        entries.clear();
        for &(off, w) in &stencil {
            let mut nb = [0usize; 2];
            let mut inside = true;
            for axis in 0..2 {
                let extent = if axis < grid.dim() { shape[axis] as isize } else { 1 };
                let k = mi[axis] as isize + off[axis];
                inside &= (0..extent).contains(&k);
                nb[axis] = k.max(0) as usize;
            }
            if inside {
                entries.push((grid.flat_index(nb), w));
            }
        }
        entries.sort_by_key(|e| e.0);
        for &(j, w) in &entries {
            cols.push(j);
            vals.push(w);
        }
        row_ptr.push(cols.len());
    }
    CsrMatrix { n, row_ptr, cols, vals }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSolveSettings {
    pub rel_tolerance: f64,
    /// `None` means ten times the number of unknowns.
    pub max_iters: Option<usize>,
}

impl Default for LinearSolveSettings {
    fn default() -> Self {
        Self {
            rel_tolerance: 1e-12,
            max_iters: None,
        }
    }
}

impl LinearSolveSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tolerance > 0.0 && self.rel_tolerance < 1.0) {
            return Err(Error::InvalidSettings(format!(
                "linear rel_tolerance must lie in (0, 1), got {}",
                self.rel_tolerance
            )));
        }
        if self.max_iters == Some(0) {
            return Err(Error::InvalidSettings("linear max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    pub abs_tolerance: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            abs_tolerance: 1e-11,
            max_iters: 50,
            max_halvings: 30,
        }
    }
}

impl NewtonSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tolerance > 0.0) {
            return Err(Error::InvalidSettings("newton abs_tolerance must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidSettings("newton max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Solves `(A + diag(shift)) x = b` by Jacobi-preconditioned CG.
pub fn conjugate_gradient(
    matrix: &CsrMatrix,
    shift: &[f64],
    b: &[f64],
    settings: &LinearSolveSettings,
) -> Result<Vec<f64>> {
    let n = matrix.dim();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let inv_diag: Vec<f64> = matrix
        .diagonal()
        .iter()
        .zip(shift)
        .map(|(d, s)| 1.0 / (d + s))
        .collect();
    let apply = |v: &[f64], out: &mut [f64]| {
        matrix.matvec(v, out);
        for ((o, s), vi) in out.iter_mut().zip(shift).zip(v) {
            *o += s * vi;
        }
    };
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let target = settings.rel_tolerance * b_norm;
    let max_iters = settings.max_iters.unwrap_or(10 * n).max(1);
    for _ in 0..max_iters {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolver(format!(
                "conjugate gradient breakdown (p·Ap = {pap:e})"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= target {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::LinearSolver(format!(
        "conjugate gradient did not reach relative residual {:e} in {max_iters} iterations (at {:e})",
        settings.rel_tolerance,
        dot(&r, &r).sqrt() / b_norm
    )))
}

/// `f`, `∂f/∂y` and `∂²f/∂y²`, evaluated node-wise.
#[derive(Debug, Clone)]
pub struct Nonlinearity {
    f: Expr,
    df: Expr,
    d2f: Expr,
}

impl Nonlinearity {
    pub fn new(f: Expr) -> Self {
        let df = f.diff_y();
        let d2f = df.diff_y();
        Self { f, df, d2f }
    }

    pub fn zero() -> Self {
        Self::new(Expr::num(0.0))
    }

    pub fn expr(&self) -> &Expr {
        &self.f
    }

    pub fn derivative(&self) -> &Expr {
        &self.df
    }

    pub fn is_zero(&self) -> bool {
        self.f.is_zero()
    }

    pub fn is_affine(&self) -> bool {
        self.d2f.is_zero()
    }

    fn sample(expr: &Expr, grid: &Grid, y: &[f64]) -> Result<Vec<f64>> {
        y.iter()
            .enumerate()
            .map(|(i, &yi)| expr.eval(&Point::new(grid.coords(i), yi, 0.0)))
            .collect()
    }

    pub fn value(&self, grid: &Grid, y: &[f64]) -> Result<Vec<f64>> {
        Self::sample(&self.f, grid, y)
    }

    pub fn first(&self, grid: &Grid, y: &[f64]) -> Result<Vec<f64>> {
        Self::sample(&self.df, grid, y)
    }

    pub fn second(&self, grid: &Grid, y: &[f64]) -> Result<Vec<f64>> {
        Self::sample(&self.d2f, grid, y)
    }

    /// Smallest sampled `∂f/∂y` over all grid nodes and the given state values.
    pub fn min_derivative(&self, grid: &Grid, y_samples: &[f64]) -> Result<f64> {
        let mut worst = f64::INFINITY;
        for i in 0..grid.num_interior() {
            let x = grid.coords(i);
            for &y in y_samples {
                worst = worst.min(self.df.eval(&Point::new(x, y, 0.0))?);
            }
        }
        Ok(worst)
    }
}

/// The semilinear state equation together with its solver settings.
#[derive(Debug, Clone)]
pub struct StateEquation {
    pub op: EllipticOperator,
    pub f: Nonlinearity,
    pub newton: NewtonSettings,
    pub linear: LinearSolveSettings,
}

/// Jacobian `A + diag(∂f/∂y(·, y))` frozen at a state `y`.
#[derive(Debug, Clone)]
pub struct Linearization<'a> {
    eq: &'a StateEquation,
    y: GridFunction,
    shift: Vec<f64>,
    curvature: Vec<f64>,
}

impl StateEquation {
    pub fn new(op: EllipticOperator, f: Nonlinearity) -> Self {
        Self {
            op,
            f,
            newton: NewtonSettings::default(),
            linear: LinearSolveSettings::default(),
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.op.grid()
    }

    /// `A y + f(·, y) − rhs`.
    pub fn residual(&self, y: &GridFunction, rhs: &GridFunction) -> Result<GridFunction> {
        let mut r = vec![0.0; y.len()];
        self.op.matrix.matvec(y.values(), &mut r);
        let fy = self.f.value(self.grid(), y.values())?;
        for ((ri, fi), bi) in r.iter_mut().zip(&fy).zip(rhs.values()) {
            *ri += fi - bi;
        }
        Ok(GridFunction::from_raw(self.grid(), r))
    }

    pub fn solve_state(&self, rhs: &GridFunction) -> Result<GridFunction> {
        self.solve_state_from(rhs, GridFunction::zeros(self.grid()))
    }

    /// Damped Newton from an explicit initial guess.
    pub fn solve_state_from(&self, rhs: &GridFunction, initial: GridFunction) -> Result<GridFunction> {
        rhs.check_same_grid(&initial)?;
        if !rhs.is_finite() {
            return Err(Error::Domain("state right-hand side is not finite".into()));
        }
        let grid = Arc::clone(self.grid());
        let a_norm = self.op.matrix.norm_inf();
        let mut y = initial;
        let mut r = self.residual(&y, rhs)?;
        let mut r_norm = l2_norm(&r);
        for _ in 0..self.newton.max_iters {
            if r_norm <= self.tolerance(a_norm, &y, rhs) {
                return Ok(y);
            }
            let shift = self.f.first(&grid, y.values())?;
            let step = conjugate_gradient(&self.op.matrix, &shift, r.values(), &self.linear)?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..=self.newton.max_halvings {
                let values = y.values().iter().zip(&step).map(|(yi, si)| yi - t * si).collect();
                let trial = GridFunction::from_raw(&grid, values);
                if let Ok(tr) = self.residual(&trial, rhs) {
                    let tn = l2_norm(&tr);
                    if tn.is_finite() && tn < r_norm {
                        y = trial;
                        r = tr;
                        r_norm = tn;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if r_norm <= self.tolerance(a_norm, &y, rhs) {
            Ok(y)
        } else {
            Err(Error::NewtonNotConverged {
                iterations: self.newton.max_iters,
                residual: r_norm,
            })
        }
    }

    // Absolute tolerance, floored at the rounding level of evaluating A y.
    fn tolerance(&self, a_norm: f64, y: &GridFunction, rhs: &GridFunction) -> f64 {
        let roundoff = 64.0 * f64::EPSILON * (a_norm * l2_norm(y) + l2_norm(rhs));
        self.newton.abs_tolerance.max(roundoff)
    }

    pub fn linearize(&self, y: &GridFunction) -> Result<Linearization<'_>> {
        let shift = self.f.first(self.grid(), y.values())?;
        let curvature = if self.f.is_affine() {
            vec![0.0; y.len()]
        } else {
            self.f.second(self.grid(), y.values())?
        };
        Ok(Linearization {
            eq: self,
            y: y.clone(),
            shift,
            curvature,
        })
    }

    pub fn solve_linearized(&self, y: &GridFunction, v: &GridFunction) -> Result<GridFunction> {
        self.linearize(y)?.solve(v)
    }

    pub fn solve_second_order(&self, y: &GridFunction, z1: &GridFunction, z2: &GridFunction) -> Result<GridFunction> {
        self.linearize(y)?.second_order(z1, z2)
    }

    pub fn solve_adjoint(&self, y: &GridFunction, source: &GridFunction) -> Result<GridFunction> {
        self.linearize(y)?.solve_adjoint(source)
    }
}

impl Linearization<'_> {
    pub fn state(&self) -> &GridFunction {
        &self.y
    }

    /// `∂f/∂y(·, y)` node-wise.
    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    /// `∂²f/∂y²(·, y)` node-wise.
    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    /// Linearized state `z = G'(u) v`.
    pub fn solve(&self, v: &GridFunction) -> Result<GridFunction> {
        v.check_same_grid(&self.y)?;
        let z = conjugate_gradient(&self.eq.op.matrix, &self.shift, v.values(), &self.eq.linear)?;
        Ok(GridFunction::from_raw(self.eq.grid(), z))
    }

    /// Adjoint state; the operator is symmetric so this is the same solve.
    pub fn solve_adjoint(&self, source: &GridFunction) -> Result<GridFunction> {
        self.solve(source)
    }

    /// Second-order term `G''(u)(v1, v2)` from the two linearized states.
    pub fn second_order(&self, z1: &GridFunction, z2: &GridFunction) -> Result<GridFunction> {
        z1.check_same_grid(z2)?;
        let rhs: Vec<f64> = self
            .curvature
            .iter()
            .zip(z1.values().iter().zip(z2.values()))
            .map(|(c, (a, b))| -c * a * b)
            .collect();
        self.solve(&GridFunction::from_raw(self.eq.grid(), rhs))
    }
}
