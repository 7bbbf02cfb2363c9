//! Tensor grids, finite differences and quadrature.

pub mod fd;
pub mod grid;
pub mod io;
pub mod quadrature;

pub use fd::{fd_gradient, fd_hessian_det, FdOperator, HessianField};
pub use grid::{Grid, GridFn, NodeKind};
pub use quadrature::{boundary_integral, interior_integral, BoundaryQuadrature};
