#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::type_complexity,
    clippy::needless_range_loop
)]

pub mod cli;
pub mod discretize;
pub mod error;
pub mod estimates;
pub mod field;
pub mod functionals;
pub mod legendre;
pub mod linalg;
pub mod operator;
pub mod polytope;
pub mod potentials;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
