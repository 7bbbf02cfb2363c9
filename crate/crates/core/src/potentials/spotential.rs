use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use super::guillemin::{guillemin_eval, guillemin_hessian, guillemin_trace};
use crate::discretize::{FdOperator, Grid, GridFn, HessianField, NodeKind};
use crate::error::{Error, Result};
use crate::field::Smooth;
use crate::linalg;
use crate::polytope::Polytope;

/// Node-wise FD derivatives of phi, kept as grid fields for interpolation.
#[derive(Debug)]
struct PhiDerivs {
    grad: Vec<Option<Vec<f64>>>,
    hess: Vec<Option<Vec<f64>>>,
    grad_fields: Vec<GridFn>,
    hess_fields: Vec<GridFn>,
}

/// u = v + s + phi, where v is the Guillemin potential (optional), s an
/// optional analytic smooth part, and phi a grid correction differenced
/// numerically.
#[derive(Clone)]
pub struct SPotential {
    poly: Arc<Polytope>,
    phi: GridFn,
    p_o: Vec<f64>,
    guillemin: bool,
    smooth: Option<Arc<dyn Smooth>>,
    fd: Arc<FdOperator>,
    derivs: Arc<PhiDerivs>,
}

impl fmt::Debug for SPotential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SPotential")
            .field("shape", &self.phi.grid().shape())
            .field("p_o", &self.p_o)
            .field("guillemin", &self.guillemin)
            .field("smooth", &self.smooth.is_some())
            .finish()
    }
}

fn derivs_of(fd: &FdOperator, phi: &GridFn) -> PhiDerivs {
    let grid = phi.grid();
    let n = grid.dim();
    let vals = phi.values();
    let (grad, hess): (Vec<_>, Vec<_>) = (0..grid.len())
        .into_par_iter()
        .map(|i| (fd.gradient_at(i, vals), fd.hessian_at(i, vals)))
        .unzip();
    let field = |src: &Vec<Option<Vec<f64>>>, c: usize| {
        GridFn::new_partial(
            grid.clone(),
            src.iter().map(|v| v.as_ref().map_or(f64::NAN, |v| v[c])).collect(),
        )
    };
    let grad_fields = (0..n).map(|c| field(&grad, c)).collect();
    let hess_fields = (0..n * n).map(|c| field(&hess, c)).collect();
    PhiDerivs {
        grad,
        hess,
        grad_fields,
        hess_fields,
    }
}

fn interp(g: &GridFn, x: &[f64]) -> f64 {
    g.try_interpolate(x).unwrap_or_else(|| {
        let grid = g.grid();
        // nearest node that actually carries a value
        let mut best = (f64::INFINITY, f64::NAN);
        for i in 0..grid.len() {
            let v = g.get(i);
            if v.is_finite() {
                let d: f64 = grid.node(i).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, v);
                }
            }
        }
        best.1
    })
}

impl SPotential {
    /// u = v + phi on the polytope carried by `phi`'s grid.
    pub fn new(phi: GridFn, p_o: Vec<f64>) -> Result<Self> {
        SPotential::build(phi, p_o, true, None)
    }

    pub fn build(phi: GridFn, p_o: Vec<f64>, guillemin: bool, smooth: Option<Arc<dyn Smooth>>) -> Result<Self> {
        let poly = phi
            .grid()
            .polytope()
            .cloned()
            .ok_or_else(|| Error::OutOfRange("SPotential needs a polytope-backed grid".into()))?;
        poly.require_interior(&p_o)?;
        let fd = Arc::new(FdOperator::new(phi.grid().clone())?);
        let derivs = Arc::new(derivs_of(&fd, &phi));
        Ok(SPotential {
            poly,
            phi,
            p_o,
            guillemin,
            smooth,
            fd,
            derivs,
        })
    }

    /// The pure Guillemin potential (phi = 0).
    pub fn guillemin(poly: Arc<Polytope>, h: f64, p_o: Vec<f64>) -> Result<Self> {
        let grid = Arc::new(Grid::new(poly, h)?);
        SPotential::new(GridFn::zeros(grid), p_o)
    }

    /// An analytic potential, optionally plus the Guillemin part.
    pub fn analytic(grid: Arc<Grid>, smooth: Arc<dyn Smooth>, p_o: Vec<f64>, guillemin: bool) -> Result<Self> {
        SPotential::build(GridFn::zeros(grid), p_o, guillemin, Some(smooth))
    }

    /// Same structure with a new correction field on the same grid.
    pub fn with_phi(&self, phi: GridFn) -> Result<Self> {
        if !phi.grid().same_layout(self.grid()) {
            return Err(Error::OutOfRange("phi grid layout differs".into()));
        }
        let derivs = Arc::new(derivs_of(&self.fd, &phi));
        Ok(SPotential {
            phi,
            derivs,
            ..self.clone()
        })
    }

    pub fn polytope(&self) -> &Arc<Polytope> {
        &self.poly
    }
    pub fn grid(&self) -> &Arc<Grid> {
        self.phi.grid()
    }
    pub fn phi(&self) -> &GridFn {
        &self.phi
    }
    pub fn p_o(&self) -> &[f64] {
        &self.p_o
    }
    pub fn has_guillemin(&self) -> bool {
        self.guillemin
    }
    pub fn smooth_part(&self) -> Option<&Arc<dyn Smooth>> {
        self.smooth.as_ref()
    }
    pub fn fd(&self) -> &Arc<FdOperator> {
        &self.fd
    }
    pub fn dim(&self) -> usize {
        self.poly.dim()
    }

    fn analytic_value(&self, x: &[f64]) -> f64 {
        let mut v = 0.0;
        if self.guillemin {
            v += guillemin_trace(&self.poly, x);
        }
        if let Some(s) = &self.smooth {
            v += s.value(x);
        }
        v
    }

    fn analytic_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        if self.guillemin {
            g = guillemin_eval(&self.poly, x)?.gradient;
        }
        if let Some(s) = &self.smooth {
            for (a, b) in g.iter_mut().zip(s.gradient(x)) {
                *a += b;
            }
        }
        Ok(g)
    }

    fn analytic_hessian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let mut h = vec![0.0; n * n];
        if self.guillemin {
            h = guillemin_hessian(&self.poly, x)?;
        }
        if let Some(s) = &self.smooth {
            for (a, b) in h.iter_mut().zip(s.hessian(x)) {
                *a += b;
            }
        }
        Ok(h)
    }

    /// Analytic Hessian of v + s alone (no phi).
    pub fn analytic_hessian_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.analytic_hessian(x)
    }

    /// u at an active node.
    pub fn node_value(&self, i: usize) -> f64 {
        self.analytic_value(&self.grid().node(i)) + self.phi.get(i)
    }

    pub fn node_gradient(&self, i: usize) -> Option<Vec<f64>> {
        let x = self.grid().node(i);
        let mut g = self.analytic_gradient(&x).ok()?;
        for (a, b) in g.iter_mut().zip(self.derivs.grad[i].as_ref()?) {
            *a += b;
        }
        Some(g)
    }

    pub fn node_hessian(&self, i: usize) -> Option<Vec<f64>> {
        let x = self.grid().node(i);
        let mut h = self.analytic_hessian(&x).ok()?;
        for (a, b) in h.iter_mut().zip(self.derivs.hess[i].as_ref()?) {
            *a += b;
        }
        Some(h)
    }

    /// u at every node (NaN at Outside nodes).
    pub fn values(&self) -> GridFn {
        let g = self.grid();
        GridFn::new_partial(
            g.clone(),
            (0..g.len())
                .map(|i| if g.is_active(i) { self.node_value(i) } else { f64::NAN })
                .collect(),
        )
    }

    pub fn gradient_field(&self) -> Vec<Option<Vec<f64>>> {
        (0..self.grid().len())
            .into_par_iter()
            .map(|i| self.node_gradient(i))
            .collect()
    }

    /// Hessians, determinants and inverses without the degeneracy check.
    pub fn hessian_field_unchecked(&self, det_floor: f64) -> HessianField {
        let hess = (0..self.grid().len())
            .into_par_iter()
            .map(|i| self.node_hessian(i))
            .collect();
        HessianField::from_hessians(self.dim(), hess, det_floor)
    }

    /// Hessian data; DegenerateHessian if det <= det_floor at any node.
    pub fn hessian_field(&self, det_floor: f64) -> Result<HessianField> {
        self.hessian_field_unchecked(det_floor).into_checked(det_floor)
    }

    /// u at an arbitrary point of the closed polytope. Inside the node hull
    /// phi is interpolated multilinearly; elsewhere it is extended by a
    /// second-order Taylor expansion from the nearest node.
    pub fn value_at(&self, x: &[f64]) -> f64 {
        let phi = match self.phi.try_interpolate(x) {
            Some(v) if self.in_node_hull(x) => v,
            _ => self.phi_taylor(x),
        };
        self.analytic_value(x) + phi
    }

    /// Boundary trace of u.
    pub fn trace_at(&self, x: &[f64]) -> f64 {
        self.analytic_value(x) + self.phi_taylor(x)
    }

    pub fn gradient_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.analytic_gradient(x)?;
        for (c, a) in g.iter_mut().enumerate() {
            *a += interp(&self.derivs.grad_fields[c], x);
        }
        Ok(g)
    }

    pub fn hessian_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.analytic_hessian(x)?;
        for (c, a) in h.iter_mut().enumerate() {
            *a += interp(&self.derivs.hess_fields[c], x);
        }
        Ok(h)
    }

    /// As `value_at`, with tensor cubic interpolation of phi where available.
    pub fn value_at_smooth(&self, x: &[f64]) -> f64 {
        if self.in_node_hull(x) {
            if let Some(v) = self.phi.try_interpolate_cubic(x) {
                return self.analytic_value(x) + v;
            }
        }
        self.value_at(x)
    }

    /// Gradient from cubic interpolation of the FD derivative fields, so the
    /// result is C1 in x away from the edge of the node array.
    pub fn gradient_at_smooth(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.analytic_gradient(x)?;
        for (c, a) in g.iter_mut().enumerate() {
            let f = &self.derivs.grad_fields[c];
            *a += f.try_interpolate_cubic(x).unwrap_or_else(|| interp(f, x));
        }
        Ok(g)
    }

    pub fn hessian_at_smooth(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.analytic_hessian(x)?;
        for (c, a) in h.iter_mut().enumerate() {
            let f = &self.derivs.hess_fields[c];
            *a += f.try_interpolate_cubic(x).unwrap_or_else(|| interp(f, x));
        }
        Ok(h)
    }

    fn in_node_hull(&self, x: &[f64]) -> bool {
        let g = self.grid();
        (0..g.dim()).all(|i| {
            let s = (x[i] - g.lo()[i]) / g.h()[i] - 0.5;
            s >= 0.0 && s <= (g.shape()[i] - 1) as f64
        })
    }

    /// Nearest node with FD derivatives, used as Taylor expansion centre.
    fn taylor_node(&self, x: &[f64]) -> Option<usize> {
        let g = self.grid();
        let c = g.nearest_active(x)?;
        if self.derivs.hess[c].is_some() {
            return Some(c);
        }
        let d2 = |j: usize| -> f64 { g.node(j).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum() };
        (0..g.len())
            .filter(|&j| self.derivs.hess[j].is_some())
            .min_by(|a, b| d2(*a).total_cmp(&d2(*b)))
    }

    fn phi_taylor(&self, x: &[f64]) -> f64 {
        let Some(c) = self.taylor_node(x) else {
            return self.phi.interpolate(x);
        };
        let n = self.dim();
        let d: Vec<f64> = self.grid().node(c).iter().zip(x).map(|(a, b)| b - a).collect();
        let g = self.derivs.grad[c].as_ref().expect("gradient at taylor node");
        let h = self.derivs.hess[c].as_ref().expect("hessian at taylor node");
        let mut v = self.phi.get(c) + linalg::dot(g, &d);
        for i in 0..n {
            for j in 0..n {
                v += 0.5 * d[i] * h[i * n + j] * d[j];
            }
        }
        v
    }

    /// Linear weights (node, coefficient) reproducing `phi_taylor` at x; the
    /// solver uses them for the boundary term.
    pub fn trace_weights(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let Some(c) = self.taylor_node(x) else {
            return Vec::new();
        };
        let n = self.dim();
        let d: Vec<f64> = self.grid().node(c).iter().zip(x).map(|(a, b)| b - a).collect();
        let mut w: Vec<(usize, f64)> = vec![(c, 1.0)];
        if let Some(st) = self.fd.gradient_stencils(c) {
            for (i, s) in st.iter().enumerate() {
                for &(k, coef) in s {
                    w.push((k, coef * d[i]));
                }
            }
        }
        if let Some(rows) = self.fd.hessian_rows(c) {
            for (k, m) in rows {
                let mut q = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        q += 0.5 * d[i] * m[i * n + j] * d[j];
                    }
                }
                w.push((*k, q));
            }
        }
        w.sort_by_key(|p| p.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(w.len());
        for (k, c) in w {
            match merged.last_mut() {
                Some(last) if last.0 == k => last.1 += c,
                _ => merged.push((k, c)),
            }
        }
        merged
    }

    /// Interior nodes where the Hessian fails to be positive semidefinite.
    pub fn convexity_violations(&self, tol: f64) -> Vec<usize> {
        let g = self.grid();
        let n = self.dim();
        (0..g.len())
            .into_par_iter()
            .filter(|&i| g.kind(i) == NodeKind::Interior)
            .filter(|&i| {
                self.node_hessian(i)
                    .is_some_and(|h| linalg::min_eigenvalue(&h, n) < -tol)
            })
            .collect()
    }
}

/// Subtracts the supporting affine function at p_o so that u(p_o) = 0 and
/// grad u(p_o) = 0. Only phi changes.
pub fn normalize_at(u: &SPotential) -> Result<SPotential> {
    let bad = u.convexity_violations(1e-8);
    if !bad.is_empty() {
        return Err(Error::NotConvex { nodes: bad });
    }
    let p = u.p_o().to_vec();
    let c = u.value_at(&p);
    let b = u.gradient_at(&p)?;
    let mut phi = u.phi().clone();
    phi.add_affine(-c + linalg::dot(&b, &p), &b.iter().map(|x| -x).collect::<Vec<_>>());
    u.with_phi(phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Polynomial;

    fn interval(h: f64) -> Arc<Grid> {
        Arc::new(Grid::new(Arc::new(Polytope::interval(0.0, 1.0)), h).unwrap())
    }

    #[test]
    fn affine_absorption() {
        let g = interval(1.0 / 64.0);
        let base = normalize_at(&SPotential::new(GridFn::zeros(g.clone()), vec![0.5]).unwrap()).unwrap();
        let shifted = SPotential::new(GridFn::from_fn(g, |x| 3.0 * x[0] + 1.0), vec![0.5]).unwrap();
        let shifted = normalize_at(&shifted).unwrap();
        for (a, b) in base.phi().values().iter().zip(shifted.phi().values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(base.value_at(&[0.5]).abs() < 1e-14);
        // normalized Guillemin interval is v + log 2
        assert!((base.trace_at(&[0.0]) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn idempotent_and_quadratic() {
        let g = interval(1.0 / 50.0);
        let u = SPotential::build(
            GridFn::from_fn(g, |x| (x[0] - 0.5).powi(2) + 7.0),
            vec![0.5],
            false,
            None,
        )
        .unwrap();
        let n1 = normalize_at(&u).unwrap();
        assert!(n1.value_at(&[0.5]).abs() < 1e-14);
        let n2 = normalize_at(&n1).unwrap();
        for (a, b) in n1.phi().values().iter().zip(n2.phi().values()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn concave_refused() {
        let g = interval(1.0 / 32.0);
        let u = SPotential::build(GridFn::from_fn(g, |x| -x[0] * x[0]), vec![0.5], false, None).unwrap();
        assert!(matches!(normalize_at(&u), Err(Error::NotConvex { .. })));
    }

    #[test]
    fn trace_weights_reproduce_taylor() {
        let p = Arc::new(Polytope::unit_square());
        let g = Arc::new(Grid::new(p, 1.0 / 16.0).unwrap());
        let phi = GridFn::from_fn(g, |x| (x[0] * 1.3).sin() + x[1].powi(3));
        let u = SPotential::new(phi.clone(), vec![0.5, 0.5]).unwrap();
        let x = [0.0, 0.37];
        let direct = u.trace_at(&x) - guillemin_trace(u.polytope(), &x);
        let w: f64 = u.trace_weights(&x).iter().map(|(k, c)| c * phi.get(*k)).sum();
        assert!((direct - w).abs() < 1e-12);
        assert!((w - 0.37f64.powi(3)).abs() < 1e-3);
    }

    #[test]
    fn analytic_part_is_exact() {
        let p = Arc::new(Polytope::unit_square());
        let g = Arc::new(Grid::new(p, 1.0 / 8.0).unwrap());
        let q = Arc::new(Polynomial::new(vec![(1.0, vec![4, 0]), (0.5, vec![0, 2])]));
        let u = SPotential::analytic(g, q, vec![0.5, 0.5], false).unwrap();
        let h = u.node_hessian(0).unwrap();
        let x = u.grid().node(0);
        assert!((h[0] - 12.0 * x[0] * x[0]).abs() < 1e-14 && (h[3] - 1.0).abs() < 1e-14);
    }
}
