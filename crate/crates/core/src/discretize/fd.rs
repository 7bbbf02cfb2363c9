//! Second-order finite differences on cell-centered grids.
//!
//! Centered stencils are used wherever both neighbours along an axis are
//! active; otherwise shifted one-sided O(h^2) stencils. Mixed derivatives
//! are tensor products of first-derivative stencils, so the Hessian is
//! symmetric by construction.

use std::sync::Arc;

use rayon::prelude::*;

use super::grid::{Grid, GridFn, NodeKind};
use crate::error::{Error, Result};
use crate::linalg;

/// Sparse linear functional over grid nodes.
pub type Stencil = Vec<(usize, f64)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Centered,
    Forward,
    Backward,
}

const MODES: [Mode; 3] = [Mode::Centered, Mode::Forward, Mode::Backward];

fn first_offsets(mode: Mode) -> &'static [(i64, f64)] {
    match mode {
        Mode::Centered => &[(-1, -0.5), (1, 0.5)],
        Mode::Forward => &[(0, -1.5), (1, 2.0), (2, -0.5)],
        Mode::Backward => &[(0, 1.5), (-1, -2.0), (-2, 0.5)],
    }
}

fn second_offsets(mode: Mode) -> &'static [(i64, f64)] {
    match mode {
        Mode::Centered => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        Mode::Forward => &[(0, 2.0), (1, -5.0), (2, 4.0), (3, -1.0)],
        Mode::Backward => &[(0, 2.0), (-1, -5.0), (-2, 4.0), (-3, -1.0)],
    }
}

fn axis_stencil(grid: &Grid, idx: usize, axis: usize, offs: &[(i64, f64)], scale: f64) -> Option<Stencil> {
    offs.iter()
        .map(|&(o, c)| {
            grid.step(idx, axis, o)
                .filter(|&j| grid.is_active(j))
                .map(|j| (j, c * scale))
        })
        .collect()
}

fn first_stencil(grid: &Grid, idx: usize, axis: usize) -> Option<Stencil> {
    let s = 1.0 / grid.h()[axis];
    MODES
        .iter()
        .find_map(|&m| axis_stencil(grid, idx, axis, first_offsets(m), s))
}

fn second_stencil(grid: &Grid, idx: usize, axis: usize) -> Option<Stencil> {
    let s = 1.0 / grid.h()[axis].powi(2);
    MODES
        .iter()
        .find_map(|&m| axis_stencil(grid, idx, axis, second_offsets(m), s))
}

fn mixed_stencil(grid: &Grid, idx: usize, a: usize, b: usize) -> Option<Stencil> {
    let s = 1.0 / (grid.h()[a] * grid.h()[b]);
    let n = grid.dim();
    for &ma in &MODES {
        for &mb in &MODES {
            let mut st = Stencil::new();
            let mut ok = true;
            'outer: for &(oa, ca) in first_offsets(ma) {
                for &(ob, cb) in first_offsets(mb) {
                    let mut offs = vec![0i64; n];
                    offs[a] = oa;
                    offs[b] = ob;
                    match grid.offset(idx, &offs).filter(|&j| grid.is_active(j)) {
                        Some(j) => st.push((j, ca * cb * s)),
                        None => {
                            ok = false;
                            break 'outer;
                        }
                    }
                }
            }
            if ok {
                return Some(st);
            }
        }
    }
    None
}

/// Precomputed gradient and Hessian stencils for every active node.
#[derive(Clone, Debug)]
pub struct FdOperator {
    grid: Arc<Grid>,
    grad: Vec<Option<Vec<Stencil>>>,
    /// Hessian rows grouped by contributing node: (k, n x n coefficients).
    hess: Vec<Option<Vec<(usize, Vec<f64>)>>>,
}

impl FdOperator {
    pub fn new(grid: Arc<Grid>) -> Result<Self> {
        if let Some(i) = grid.shape().iter().position(|&s| s < 4) {
            return Err(Error::TooCoarse(format!(
                "axis {i} has {} nodes; at least 4 are needed for one-sided stencils",
                grid.shape()[i]
            )));
        }
        let n = grid.dim();
        let per_node: Vec<(Option<Vec<Stencil>>, Option<Vec<(usize, Vec<f64>)>>)> = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                if !grid.is_active(idx) {
                    return (None, None);
                }
                let grad: Option<Vec<Stencil>> = (0..n).map(|i| first_stencil(&grid, idx, i)).collect();
                let hess = hessian_rows(&grid, idx);
                (grad, hess)
            })
            .collect();
        let (grad, hess): (Vec<_>, Vec<_>) = per_node.into_iter().unzip();
        for idx in 0..grid.len() {
            if grid.kind(idx) == NodeKind::Interior && (grad[idx].is_none() || hess[idx].is_none()) {
                return Err(Error::TooCoarse(format!("interior node {idx} lacks a stencil")));
            }
        }
        Ok(FdOperator { grid, grad, hess })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn has_hessian(&self, idx: usize) -> bool {
        self.hess[idx].is_some()
    }

    pub fn gradient_stencils(&self, idx: usize) -> Option<&[Stencil]> {
        self.grad[idx].as_deref()
    }

    pub fn hessian_rows(&self, idx: usize) -> Option<&[(usize, Vec<f64>)]> {
        self.hess[idx].as_deref()
    }

    pub fn gradient_at(&self, idx: usize, values: &[f64]) -> Option<Vec<f64>> {
        self.grad[idx]
            .as_ref()
            .map(|st| st.iter().map(|s| s.iter().map(|&(j, c)| c * values[j]).sum()).collect())
    }

    pub fn hessian_at(&self, idx: usize, values: &[f64]) -> Option<Vec<f64>> {
        let n = self.grid.dim();
        self.hess[idx].as_ref().map(|rows| {
            let mut h = vec![0.0; n * n];
            for (k, m) in rows {
                let v = values[*k];
                for (a, b) in h.iter_mut().zip(m) {
                    *a += b * v;
                }
            }
            h
        })
    }
}

fn hessian_rows(grid: &Grid, idx: usize) -> Option<Vec<(usize, Vec<f64>)>> {
    let n = grid.dim();
    let mut acc: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut push = |j: usize, i: usize, k: usize, c: f64| {
        let pos = match acc.iter().position(|(q, _)| *q == j) {
            Some(p) => p,
            None => {
                acc.push((j, vec![0.0; n * n]));
                acc.len() - 1
            }
        };
        acc[pos].1[i * n + k] += c;
        if i != k {
            acc[pos].1[k * n + i] += c;
        }
    };
    for i in 0..n {
        for (j, c) in second_stencil(grid, idx, i)? {
            push(j, i, i, c);
        }
        for k in (i + 1)..n {
            for (j, c) in mixed_stencil(grid, idx, i, k)? {
                push(j, i, k, c);
            }
        }
    }
    acc.sort_by_key(|(j, _)| *j);
    Some(acc)
}

/// Gradient field; `None` at Outside nodes and Band nodes without a stencil.
pub fn fd_gradient(g: &GridFn) -> Result<Vec<Option<Vec<f64>>>> {
    let op = FdOperator::new(g.grid().clone())?;
    Ok((0..g.grid().len()).map(|i| op.gradient_at(i, g.values())).collect())
}

/// Hessian, determinant and inverse Hessian at every node with a stencil.
#[derive(Clone, Debug)]
pub struct HessianField {
    pub dim: usize,
    pub hess: Vec<Option<Vec<f64>>>,
    pub det: Vec<Option<f64>>,
    /// Defined only where det > det_floor.
    pub inv: Vec<Option<Vec<f64>>>,
    pub degenerate: Vec<usize>,
}

impl HessianField {
    pub fn from_hessians(dim: usize, hess: Vec<Option<Vec<f64>>>, det_floor: f64) -> Self {
        let det: Vec<Option<f64>> = hess.iter().map(|h| h.as_ref().map(|m| linalg::det(m, dim))).collect();
        let mut degenerate = Vec::new();
        let inv = hess
            .iter()
            .zip(&det)
            .enumerate()
            .map(|(i, (h, d))| match (h, d) {
                (Some(m), Some(d)) if *d > det_floor => linalg::inverse(m, dim),
                (Some(_), Some(_)) => {
                    degenerate.push(i);
                    None
                }
                _ => None,
            })
            .collect();
        HessianField {
            dim,
            hess,
            det,
            inv,
            degenerate,
        }
    }

    pub fn into_checked(self, det_floor: f64) -> Result<Self> {
        if self.degenerate.is_empty() {
            Ok(self)
        } else {
            Err(Error::DegenerateHessian {
                nodes: self.degenerate,
                floor: det_floor,
            })
        }
    }
}

pub fn fd_hessian_det(g: &GridFn, det_floor: f64) -> Result<HessianField> {
    let op = FdOperator::new(g.grid().clone())?;
    let hess = (0..g.grid().len()).map(|i| op.hessian_at(i, g.values())).collect();
    HessianField::from_hessians(g.grid().dim(), hess, det_floor).into_checked(det_floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polytope::Polytope;

    fn square(h: f64) -> Arc<Grid> {
        Arc::new(Grid::new(Arc::new(Polytope::unit_square()), h).unwrap())
    }

    #[test]
    fn gradient_exact_on_affine_and_quadratic() {
        let g = square(1.0 / 16.0);
        let f = GridFn::from_fn(g.clone(), |x| x[0]);
        for v in fd_gradient(&f).unwrap().into_iter().flatten() {
            assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        }
        let f = GridFn::from_fn(g.clone(), |x| x[0] * x[0]);
        let grad = fd_gradient(&f).unwrap();
        for (i, v) in grad.iter().enumerate() {
            let x = g.node(i);
            let v = v.as_ref().unwrap();
            assert!((v[0] - 2.0 * x[0]).abs() < 1e-11, "{x:?} {v:?}");
        }
    }

    #[test]
    fn guillemin_gradient_vanishes_at_center() {
        let p = Arc::new(Polytope::interval(0.0, 1.0));
        let g = Arc::new(Grid::with_shape(p, &[1001]).unwrap());
        let f = GridFn::from_fn(g.clone(), |x| x[0] * x[0].ln() + (1.0 - x[0]) * (1.0 - x[0]).ln());
        let grad = fd_gradient(&f).unwrap();
        let mid = 500;
        assert!((g.node(mid)[0] - 0.5).abs() < 1e-15);
        assert!(grad[mid].as_ref().unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn quadratic_hessian_and_det() {
        let g = square(1.0 / 8.0);
        let f = GridFn::from_fn(g, |x| x[0] * x[0] + x[1] * x[1]);
        let hf = fd_hessian_det(&f, 1e-12).unwrap();
        for (h, d) in hf.hess.iter().zip(&hf.det) {
            let h = h.as_ref().unwrap();
            assert!((h[0] - 2.0).abs() < 1e-9 && (h[3] - 2.0).abs() < 1e-9 && h[1].abs() < 1e-9);
            assert!((d.unwrap() - 4.0).abs() < 1e-8);
        }
    }

    #[test]
    fn guillemin_det_at_center() {
        let p = Arc::new(Polytope::interval(0.0, 1.0));
        let g = Arc::new(Grid::with_shape(p, &[1001]).unwrap());
        let f = GridFn::from_fn(g, |x| x[0] * x[0].ln() + (1.0 - x[0]) * (1.0 - x[0]).ln());
        let hf = fd_hessian_det(&f, 1e-12).unwrap();
        // three-point truncation error is h^2 v''''/12 = 32e-6/12
        assert!((hf.det[500].unwrap() - 4.0).abs() < 3e-6);
    }

    #[test]
    fn affine_is_degenerate() {
        let g = square(1.0 / 8.0);
        let f = GridFn::from_fn(g.clone(), |x| 1.0 + x[0] - x[1]);
        match fd_hessian_det(&f, 1e-12) {
            Err(Error::DegenerateHessian { nodes, .. }) => assert_eq!(nodes.len(), g.len()),
            other => panic!("expected DegenerateHessian, got {other:?}"),
        }
    }

    #[test]
    fn hessian_symmetric_and_inverse_consistent() {
        let g = square(1.0 / 12.0);
        let f = GridFn::from_fn(g, |x| (x[0] + 0.3 * x[1]).exp() + x[1] * x[1] + x[0].powi(4));
        let hf = fd_hessian_det(&f, 1e-12).unwrap();
        for (h, inv) in hf.hess.iter().zip(&hf.inv) {
            let h = h.as_ref().unwrap();
            assert_eq!(h[1], h[2]);
            let p = linalg::matmul(h, inv.as_ref().unwrap(), 2);
            for (a, b) in p.iter().zip(linalg::identity(2)) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn too_coarse() {
        let g = Arc::new(Grid::new(Arc::new(Polytope::unit_square()), 0.5).unwrap());
        assert!(matches!(FdOperator::new(g), Err(Error::TooCoarse(_))));
    }
}
