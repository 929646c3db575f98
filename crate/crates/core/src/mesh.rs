//! Uniform tensor grids on boxes in one or two dimensions and the scalar
//! fields that live on their interior nodes.
//!
//! Boundary nodes carry the homogeneous Dirichlet value and are never
//! stored. The discrete `L²` pairing is the node-wise rectangle rule
//! `Σ f g Π h_i` over interior nodes, which is the same weighting the
//! finite-difference operators use.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    extents: Vec<(f64, f64)>,
    points: Vec<usize>,
    spacing: Vec<f64>,
}

impl Grid {
    /// `extents[i] = (a_i, b_i)` and `points[i]` counts boundary nodes too.
    pub fn new(extents: Vec<(f64, f64)>, points: Vec<usize>) -> Result<Self> {
        let dim = extents.len();
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if points.len() != dim {
            return Err(Error::InvalidGrid(format!(
                "{} point counts given for a {dim}-dimensional grid",
                points.len()
            )));
        }
        let mut spacing = Vec::with_capacity(dim);
        for (axis, (&(a, b), &p)) in extents.iter().zip(&points).enumerate() {
            if p < 3 {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis}: points_per_axis must be at least 3, got {p}"
                )));
            }
            if !(a.is_finite() && b.is_finite()) || b <= a {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis}: extent [{a}, {b}] is not a proper interval"
                )));
            }
            spacing.push((b - a) / (p - 1) as f64);
        }
        Ok(Self {
            extents,
            points,
            spacing,
        })
    }

    pub fn unit_interval(points: usize) -> Result<Self> {
        Self::new(vec![(0.0, 1.0)], vec![points])
    }

    pub fn unit_square(points: usize) -> Result<Self> {
        Self::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![points, points])
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[(f64, f64)] {
        &self.extents
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Interior node count along each axis.
    pub fn interior_shape(&self) -> Vec<usize> {
        self.points.iter().map(|p| p - 2).collect()
    }

    pub fn num_interior(&self) -> usize {
        self.points.iter().map(|p| p - 2).product()
    }

    /// Quadrature weight of every interior node (`Π h_i`).
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Interior multi-index (zero based, x1 fastest) of a flat index.
    pub fn multi_index(&self, flat: usize) -> [usize; 2] {
        let n1 = self.points[0] - 2;
        [flat % n1, flat / n1]
    }

    pub fn flat_index(&self, idx: [usize; 2]) -> usize {
        idx[0] + (self.points[0] - 2) * idx[1]
    }

    /// Physical coordinates of an interior node; unused axes are zero.
    pub fn coords(&self, flat: usize) -> [f64; 2] {
        let mi = self.multi_index(flat);
        let mut x = [0.0; 2];
        for axis in 0..self.dim() {
            x[axis] = self.extents[axis].0 + (mi[axis] + 1) as f64 * self.spacing[axis];
        }
        x
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (axis, (&(a, b), p)) in self.extents.iter().zip(&self.points).enumerate() {
            if axis > 0 {
                write!(f, " x ")?;
            }
            write!(f, "[{a}, {b}]:{p}")?;
        }
        Ok(())
    }
}

/// A scalar field sampled at the interior nodes of a [`Grid`].
///
/// Arithmetic operators panic when the operands live on different grids,
/// the same way shape mismatches panic in array libraries. Use
/// [`inner_product`] or [`GridFunction::check_same_grid`] for a fallible
/// comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: vec![0.0; grid.num_interior()],
        }
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: vec![c; grid.num_interior()],
        }
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_interior() {
            return Err(Error::GridMismatch(format!(
                "expected {} interior values, got {}",
                grid.num_interior(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at node {i}")));
        }
        Ok(Self {
            grid: Arc::clone(grid),
            values,
        })
    }

    /// Samples `f` at every interior node.
    pub fn from_fn(grid: &Arc<Grid>, mut f: impl FnMut([f64; 2]) -> f64) -> Self {
        let values = (0..grid.num_interior()).map(|i| f(grid.coords(i))).collect();
        Self {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub(crate) fn from_raw(grid: &Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.num_interior());
        Self {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_grid(&self, other: &GridFunction) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub fn check_same_grid(&self, other: &GridFunction) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{} vs {}", self.grid, other.grid)))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(&self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Self {
        self.assert_same_grid(other);
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self::from_raw(&self.grid, values)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    /// Node-wise product.
    pub fn hadamard(&self, other: &GridFunction) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &GridFunction) -> Self {
        self.zip_map(other, |a, b| a + c * b)
    }

    /// Largest node magnitude (discrete stand-in for the `L^∞` norm).
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn assert_same_grid(&self, other: &GridFunction) {
        assert!(
            self.same_grid(other),
            "grid functions live on different grids: {} vs {}",
            self.grid,
            other.grid
        );
    }
}

impl Add for &GridFunction {
    type Output = GridFunction;
    fn add(self, rhs: &GridFunction) -> GridFunction {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &GridFunction {
    type Output = GridFunction;
    fn sub(self, rhs: &GridFunction) -> GridFunction {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul<f64> for &GridFunction {
    type Output = GridFunction;
    fn mul(self, rhs: f64) -> GridFunction {
        self.scale(rhs)
    }
}

impl Neg for &GridFunction {
    type Output = GridFunction;
    fn neg(self) -> GridFunction {
        self.scale(-1.0)
    }
}

/// Rectangle-rule approximation of `∫_Ω f g dx`.
pub fn inner_product(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    f.check_same_grid(g)?;
    Ok(dot(&f.values, &g.values) * f.grid.cell_volume())
}

pub fn l2_norm(f: &GridFunction) -> f64 {
    (dot(&f.values, &f.values) * f.grid.cell_volume()).sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
