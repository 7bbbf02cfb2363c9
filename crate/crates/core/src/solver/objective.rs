//! The discretized Mabuchi functional as a function of phi, with its
//! gradient and Hessian-vector product.
//!
//! F(phi) = -sum_m w_m D_m log det(H_m + R_m phi) + lin . phi + const, where
//! H_m is the analytic Hessian at node m and R_m its FD Hessian rows.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::discretize::{FdOperator, GridFn};
use crate::error::{Error, Result};
use crate::field::DensityPair;
use crate::functionals::LQuadrature;
use crate::linalg;
use crate::polytope::Polytope;
use crate::potentials::guillemin::guillemin_hessian;
use crate::potentials::SPotential;

pub(crate) struct Objective {
    pub n: usize,
    pub fd: Arc<FdOperator>,
    /// Nodes carrying a Hessian, with w D and the analytic Hessian there.
    pub nodes: Vec<usize>,
    pub wd: Vec<f64>,
    pub ha: Vec<Vec<f64>>,
    /// Linear part over all grid nodes.
    pub lin: Vec<f64>,
    /// Nodes that are free unknowns, and the inverse map.
    pub free: Vec<usize>,
    pub slot: Vec<Option<usize>>,
    /// Orthonormal basis of nodal affine functions restricted to `free`.
    pub affine: Vec<Vec<f64>>,
    pub det_floor: f64,
}

/// Hessian data at the current iterate.
pub(crate) struct State {
    pub value: f64,
    pub inv: Vec<Vec<f64>>,
    pub det_min: f64,
}

fn pd_inverse(h: &[f64], n: usize, floor: f64) -> Option<(f64, Vec<f64>)> {
    let m = DMatrix::from_row_slice(n, n, h);
    let ch = m.cholesky()?;
    let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    if !logdet.is_finite() || logdet.exp() <= floor {
        return None;
    }
    let inv = ch.inverse();
    Some((logdet, (0..n * n).map(|k| inv[(k / n, k % n)]).collect()))
}

impl Objective {
    pub fn new(u: &SPotential, dp: &DensityPair, det_floor: f64) -> Result<Self> {
        let grid = u.grid().clone();
        let fd = u.fd().clone();
        let n = u.dim();
        let w = grid.weights();
        let nodes: Vec<usize> = (0..grid.len()).filter(|&m| fd.has_hessian(m) && w[m] > 0.0).collect();
        let wd: Vec<f64> = nodes.iter().map(|&m| w[m] * dp.d.eval(&grid.node(m))).collect();
        let ha = nodes
            .iter()
            .map(|&m| u.analytic_hessian_at(&grid.node(m)))
            .collect::<Result<Vec<_>>>()?;

        let q = LQuadrature::new(&grid, dp);
        let mut lin = if u.has_guillemin() && u.polytope().is_box_aligned() {
            boundary_by_parts(u, dp, &nodes, &wd)?
        } else {
            let mut b = vec![0.0; grid.len()];
            for (p, wb) in q.boundary_points.iter().zip(&q.boundary_weights) {
                for (k, c) in u.trace_weights(p) {
                    b[k] += wb * c;
                }
            }
            b
        };
        for (k, wk) in q.interior_nodes.iter().zip(&q.interior_weights) {
            lin[*k] -= wk;
        }

        let mut is_free = vec![false; grid.len()];
        for &m in &nodes {
            for (k, _) in fd.hessian_rows(m).unwrap_or(&[]) {
                is_free[*k] = true;
            }
        }
        let free: Vec<usize> = (0..grid.len()).filter(|&k| is_free[k]).collect();
        let mut slot = vec![None; grid.len()];
        for (s, &k) in free.iter().enumerate() {
            slot[k] = Some(s);
        }
        if free.len() <= n + 1 {
            return Err(Error::TooCoarse("too few unknowns for the solver".into()));
        }

        let mut affine: Vec<Vec<f64>> = Vec::new();
        let basis = (0..=n).map(|c| {
            free.iter()
                .map(|&k| if c == 0 { 1.0 } else { grid.node(k)[c - 1] })
                .collect::<Vec<f64>>()
        });
        for mut v in basis {
            for _ in 0..2 {
                for q in &affine {
                    let d = linalg::dot(q, &v);
                    v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
                }
            }
            let nv = linalg::norm(&v);
            v.iter_mut().for_each(|a| *a /= nv);
            affine.push(v);
        }

        Ok(Objective {
            n,
            fd,
            nodes,
            wd,
            ha,
            lin,
            free,
            slot,
            affine,
            det_floor,
        })
    }

    pub fn len(&self) -> usize {
        self.free.len()
    }

    /// Removes the affine component (Euclidean projection on free nodes).
    pub fn project(&self, v: &mut [f64]) {
        for q in &self.affine {
            let d = linalg::dot(q, v);
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
    }

    /// Writes free values into a full-grid vector.
    pub fn scatter(&self, base: &[f64], x: &[f64], t: f64) -> Vec<f64> {
        let mut out = base.to_vec();
        for (s, &k) in self.free.iter().enumerate() {
            out[k] += t * x[s];
        }
        out
    }

    /// Value and inverse Hessians; None when some Hessian is not positive
    /// definite or its determinant is at or below the floor.
    pub fn state(&self, phi: &[f64]) -> Option<State> {
        let n = self.n;
        let parts: Vec<Option<(f64, Vec<f64>, f64)>> = self
            .nodes
            .par_iter()
            .enumerate()
            .map(|(s, &m)| {
                let hp = self.fd.hessian_at(m, phi)?;
                let h: Vec<f64> = self.ha[s].iter().zip(&hp).map(|(a, b)| a + b).collect();
                let (logdet, inv) = pd_inverse(&h, n, self.det_floor)?;
                Some((-self.wd[s] * logdet, inv, logdet))
            })
            .collect();
        let mut value: f64 = self.lin.iter().zip(phi).map(|(a, b)| a * b).sum();
        let mut inv = Vec::with_capacity(parts.len());
        let mut det_min = f64::INFINITY;
        for p in parts {
            let (v, i, ld) = p?;
            value += v;
            inv.push(i);
            det_min = det_min.min(ld.exp());
        }
        Some(State { value, inv, det_min })
    }

    pub fn gradient(&self, st: &State) -> Vec<f64> {
        let n2 = self.n * self.n;
        let mut g: Vec<f64> = self.free.iter().map(|&k| self.lin[k]).collect();
        for (s, &m) in self.nodes.iter().enumerate() {
            let hinv = &st.inv[s];
            for (k, c) in self.fd.hessian_rows(m).unwrap() {
                if let Some(j) = self.slot[*k] {
                    let tr: f64 = (0..n2).map(|ij| c[ij] * hinv[ij]).sum();
                    g[j] -= self.wd[s] * tr;
                }
            }
        }
        g
    }

    /// Hessian of F applied to a direction over the free nodes.
    pub fn hess_vec(&self, st: &State, p: &[f64]) -> Vec<f64> {
        let n = self.n;
        let n2 = n * n;
        let t: Vec<Vec<f64>> = self
            .nodes
            .par_iter()
            .enumerate()
            .map(|(s, &m)| {
                let mut sm = vec![0.0; n2];
                for (k, c) in self.fd.hessian_rows(m).unwrap() {
                    if let Some(j) = self.slot[*k] {
                        sm.iter_mut().zip(c).for_each(|(a, b)| *a += b * p[j]);
                    }
                }
                let hinv = &st.inv[s];
                let t = linalg::matmul(&linalg::matmul(hinv, &sm, n), hinv, n);
                t.into_iter().map(|x| x * self.wd[s]).collect()
            })
            .collect();
        let mut out = vec![0.0; self.len()];
        for (s, &m) in self.nodes.iter().enumerate() {
            for (k, c) in self.fd.hessian_rows(m).unwrap() {
                if let Some(j) = self.slot[*k] {
                    out[j] += (0..n2).map(|ij| c[ij] * t[s][ij]).sum::<f64>();
                }
            }
        }
        out
    }

    /// Diagonal of the Hessian of F, used as preconditioner.
    pub fn diagonal(&self, st: &State) -> Vec<f64> {
        let n = self.n;
        let n2 = n * n;
        let mut d = vec![0.0; self.len()];
        for (s, &m) in self.nodes.iter().enumerate() {
            let hinv = &st.inv[s];
            for (k, c) in self.fd.hessian_rows(m).unwrap() {
                if let Some(j) = self.slot[*k] {
                    let t = linalg::matmul(&linalg::matmul(hinv, c, n), hinv, n);
                    d[j] += self.wd[s] * (0..n2).map(|ij| c[ij] * t[ij]).sum::<f64>();
                }
            }
        }
        d
    }

    pub fn to_gridfn(&self, u: &SPotential, phi: Vec<f64>) -> Result<GridFn> {
        GridFn::new(u.grid().clone(), phi)
    }
}

/// sum_ij d_i d_j (D v^ij) at x by central differences of the analytic
/// inverse Guillemin Hessian, with the step kept inside the polytope.
fn divdiv_dv(poly: &Polytope, dp: &DensityPair, x: &[f64]) -> Result<f64> {
    let n = poly.dim();
    let (_, dmin) = poly.min_facet_distance(x);
    let e = (0.25 * dmin / poly.max_normal_norm().max(1.0)).min(1e-3);
    let f = |y: &[f64], i: usize, j: usize| -> Result<f64> {
        let h = guillemin_hessian(poly, y)?;
        let inv = linalg::inverse(&h, n).ok_or_else(|| Error::OutOfRange("singular Guillemin Hessian".into()))?;
        Ok(dp.d.eval(y) * inv[i * n + j])
    };
    let at = |i: usize, si: f64, j: usize, sj: f64| {
        let mut y = x.to_vec();
        y[i] += si * e;
        y[j] += sj * e;
        y
    };
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += if i == j {
                (f(&at(i, 1.0, i, 0.0), i, i)? - 2.0 * f(x, i, i)? + f(&at(i, -1.0, i, 0.0), i, i)?) / (e * e)
            } else {
                (f(&at(i, 1.0, j, 1.0), i, j)? - f(&at(i, 1.0, j, -1.0), i, j)? - f(&at(i, -1.0, j, 1.0), i, j)?
                    + f(&at(i, -1.0, j, -1.0), i, j)?)
                    / (4.0 * e * e)
            };
        }
    }
    Ok(acc)
}

/// Node weights b with sum_j b_j psi_j approximating the boundary integral
/// of psi D dsigma through the identity
/// int_boundary psi D dsigma = int D v^ij psi_ij - int psi d_ij(D v^ij),
/// with psi_ij the FD Hessian. Unlike a trace extrapolation, these weights
/// make the discrete gradient vanish node by node at u = v when v solves
/// the equation, so no boundary layer forms in phi. Only second order on
/// boxes; cut cells of slanted facets make it first order.
pub(crate) fn boundary_by_parts(u: &SPotential, dp: &DensityPair, nodes: &[usize], wd: &[f64]) -> Result<Vec<f64>> {
    let grid = u.grid();
    let poly = u.polytope();
    let n = u.dim();
    let fd = u.fd();
    let w = grid.weights();
    let parts: Vec<Result<Vec<(usize, f64)>>> = nodes
        .par_iter()
        .zip(wd)
        .map(|(&m, &wdm)| {
            let x = grid.node(m);
            let vinv = linalg::inverse(&guillemin_hessian(poly, &x)?, n)
                .ok_or_else(|| Error::OutOfRange("singular Guillemin Hessian".into()))?;
            let mut out: Vec<(usize, f64)> = fd
                .hessian_rows(m)
                .unwrap_or(&[])
                .iter()
                .map(|(k, c)| (*k, wdm * c.iter().zip(&vinv).map(|(a, b)| a * b).sum::<f64>()))
                .collect();
            out.push((m, -w[m] * divdiv_dv(poly, dp, &x)?));
            Ok(out)
        })
        .collect();
    let mut b = vec![0.0; grid.len()];
    for p in parts {
        for (k, c) in p? {
            b[k] += c;
        }
    }
    Ok(b)
}

/// Preconditioned CG on the affine complement. Returns the direction and
/// the number of iterations.
pub(crate) fn pcg(obj: &Objective, st: &State, rhs: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, usize) {
    let diag = obj.diagonal(st);
    let precond = |r: &[f64]| -> Vec<f64> {
        let mut z: Vec<f64> = r
            .iter()
            .zip(&diag)
            .map(|(a, d)| if *d > 0.0 { a / d } else { *a })
            .collect();
        obj.project(&mut z);
        z
    };
    let mut x = vec![0.0; rhs.len()];
    let mut r = rhs.to_vec();
    obj.project(&mut r);
    let r0 = linalg::norm(&r);
    if r0 == 0.0 {
        return (x, 0);
    }
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = linalg::dot(&r, &z);
    for it in 1..=max_iter {
        let mut ap = obj.hess_vec(st, &p);
        obj.project(&mut ap);
        let pap = linalg::dot(&p, &ap);
        if !(pap > 0.0) {
            return (if it == 1 { z } else { x }, it);
        }
        let alpha = rz / pap;
        x.iter_mut().zip(&p).for_each(|(a, b)| *a += alpha * b);
        r.iter_mut().zip(&ap).for_each(|(a, b)| *a -= alpha * b);
        if linalg::norm(&r) <= tol * r0 {
            return (x, it);
        }
        z = precond(&r);
        let rz_new = linalg::dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(a, b)| *a = b + beta * *a);
    }
    (x, max_iter)
}

/// Smallest Ritz value of the projected Hessian from `steps` Lanczos steps
/// with full reorthogonalization, relative to the largest.
pub(crate) fn lanczos_min(obj: &Objective, st: &State, start: Vec<f64>, steps: usize) -> (f64, f64) {
    let mut v = start;
    obj.project(&mut v);
    let nv = linalg::norm(&v);
    if nv == 0.0 {
        return (0.0, 0.0);
    }
    v.iter_mut().for_each(|a| *a /= nv);
    let mut basis: Vec<Vec<f64>> = vec![v];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    for j in 0..steps.min(obj.len().saturating_sub(obj.n + 1)) {
        let mut w = obj.hess_vec(st, &basis[j]);
        obj.project(&mut w);
        let a = linalg::dot(&w, &basis[j]);
        alpha.push(a);
        for _ in 0..2 {
            for q in &basis {
                let d = linalg::dot(q, &w);
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= d * y);
            }
        }
        let b = linalg::norm(&w);
        if b < 1e-14 * a.abs().max(1e-300) {
            break;
        }
        beta.push(b);
        w.iter_mut().for_each(|x| *x /= b);
        basis.push(w);
    }
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let ev = t.symmetric_eigenvalues();
    let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::BoundaryQuadrature;
    use crate::field::{Polynomial, ScalarField};

    fn check(poly: Polytope, h: f64, dp: DensityPair, tol: f64) {
        let poly = Arc::new(poly);
        let c = poly.vertex_centroid();
        let u = SPotential::guillemin(poly.clone(), h, c).unwrap();
        let grid = u.grid();
        let nodes: Vec<usize> = (0..grid.len())
            .filter(|&m| u.fd().has_hessian(m) && grid.weights()[m] > 0.0)
            .collect();
        let wd: Vec<f64> = nodes
            .iter()
            .map(|&m| grid.weights()[m] * dp.d.eval(&grid.node(m)))
            .collect();
        let b = boundary_by_parts(&u, &dp, &nodes, &wd).unwrap();
        let bq = BoundaryQuadrature::new(&poly, h / 4.0);
        let psi = |x: &[f64]| {
            x.iter()
                .enumerate()
                .map(|(i, v)| (1.3 + i as f64 * 0.7) * v * v + 0.2 * v)
                .sum::<f64>()
                + 1.0
        };
        let exact = bq.integrate(|x| psi(x) * dp.d.eval(x));
        let approx: f64 = (0..grid.len())
            .map(|k| b[k] * if grid.is_active(k) { psi(&grid.node(k)) } else { 0.0 })
            .sum();
        assert!((exact - approx).abs() < tol * exact.abs(), "{exact} {approx}");
    }

    #[test]
    fn by_parts_matches_boundary_quadrature() {
        check(
            Polytope::interval(0.0, 1.0),
            1.0 / 64.0,
            DensityPair::constant(1.0, 2.0),
            1e-8,
        );
        check(
            Polytope::unit_square(),
            1.0 / 32.0,
            DensityPair::constant(1.0, 4.0),
            1e-4,
        );
        let d = Polynomial::new(vec![(1.0, vec![0, 0]), (0.3, vec![1, 0]), (0.2, vec![1, 1])]);
        check(
            Polytope::unit_square(),
            1.0 / 32.0,
            DensityPair::new(ScalarField::Polynomial(d), ScalarField::Constant(0.0)),
            1e-4,
        );
        check(
            Polytope::unit_cube(3),
            1.0 / 16.0,
            DensityPair::constant(1.0, 6.0),
            1e-3,
        );
    }
}
