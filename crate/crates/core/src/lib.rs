//! Nash equilibria of multi-player optimal control games governed by
//! semilinear elliptic equations, together with second-order certificates
//! and an empirical harness for their full stability under tilt and
//! parameter perturbations.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calculus;
pub mod cli;
pub mod equilibrium;
pub mod error;
pub mod expr;
pub mod game;
pub mod mesh;
pub mod pde;
pub mod perturb;
pub mod stability;

pub use error::{Error, Result};
