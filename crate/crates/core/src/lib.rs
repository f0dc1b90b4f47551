//! Canonical coordinate charts adapted to finite families of vector fields.
//!
//! The crate builds exponential ("first kind") coordinates
//! `t -> exp(t1 X_j1 + ... + tn X_jn) x0` around a base point, solves the
//! singular matrix ODE that describes the pulled-back fields, and measures
//! every quantitative property of the resulting chart numerically:
//! Carnot-Caratheodory balls and distances, adapted Hölder and Zygmund norms,
//! densities, and the scaling maps of graded (Hörmander) systems.

pub mod ccmetric;
pub mod chart;
pub mod density;
pub mod error;
pub mod expr;
pub mod fields;
pub mod flows;
pub mod funcspaces;
pub mod linalg;
pub mod odecore;
pub mod sampling;
pub mod scaling;

pub use error::{Error, Result};
pub use expr::Expr;
pub use fields::{DomainBox, IndexTuple, VectorField, VectorSystem};
