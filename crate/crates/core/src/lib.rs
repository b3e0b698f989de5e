//! Estimation of semiparametric partial-mastery cognitive diagnosis models.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod fit;
pub mod io;
pub mod likelihood;
pub mod linalg;
pub mod mala;
pub mod marginal;
pub mod mirror_descent;
pub mod model;
pub mod rng;
pub mod simgen;

pub use error::{Error, Result};
