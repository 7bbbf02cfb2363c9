//! L_A, the Mabuchi functional, affine defects, the stability constant, the
//! Monge-Ampere segment measure and the boundary-mass bound.

pub mod stability;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretize::quadrature::{singular_integral, DEFAULT_COLLAR};
use crate::discretize::{BoundaryQuadrature, Grid};
use crate::error::{Error, Result};
use crate::field::DensityPair;
use crate::linalg;
use crate::polytope::Polytope;
use crate::potentials::guillemin::guillemin_hessian;
use crate::potentials::SPotential;

pub use stability::{replay_witness, stability_lambda, FamilyConfig, Kink, PlFunction, StabilityReport};

/// Precomputed quadrature for L_A: boundary nodes weighted by sigma * D,
/// interior nodes weighted by w * A * D.
#[derive(Clone, Debug)]
pub struct LQuadrature {
    pub boundary_points: Vec<Vec<f64>>,
    pub boundary_weights: Vec<f64>,
    pub interior_nodes: Vec<usize>,
    pub interior_points: Vec<Vec<f64>>,
    pub interior_weights: Vec<f64>,
}

impl LQuadrature {
    pub fn new(grid: &Grid, dp: &DensityPair) -> Self {
        let poly = grid.polytope().expect("polytope-backed grid");
        let bq = BoundaryQuadrature::new(poly, grid.h_max());
        let boundary_weights = bq
            .points
            .iter()
            .zip(&bq.weights)
            .map(|(p, w)| w * dp.d.eval(p))
            .collect();
        let interior_nodes: Vec<usize> = (0..grid.len()).filter(|&i| grid.weights()[i] > 0.0).collect();
        let interior_points: Vec<Vec<f64>> = interior_nodes.iter().map(|&i| grid.node(i)).collect();
        let interior_weights = interior_nodes
            .iter()
            .zip(&interior_points)
            .map(|(&i, x)| grid.weights()[i] * dp.a.eval(x) * dp.d.eval(x))
            .collect();
        LQuadrature {
            boundary_points: bq.points,
            boundary_weights,
            interior_nodes,
            interior_points,
            interior_weights,
        }
    }

    /// Boundary integral of f D dsigma.
    pub fn boundary(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.boundary_points
            .iter()
            .zip(&self.boundary_weights)
            .map(|(p, w)| w * f(p))
            .sum()
    }

    /// Interior integral of f A D.
    pub fn interior(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.interior_points
            .iter()
            .zip(&self.interior_weights)
            .map(|(p, w)| w * f(p))
            .sum()
    }

    /// L_A of a function given pointwise on the closed polytope.
    pub fn eval(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.boundary(&f) - self.interior(&f)
    }
}

/// L_A(u) for a grid potential: boundary traces plus node values.
pub fn l_functional(u: &SPotential, dp: &DensityPair) -> f64 {
    let q = LQuadrature::new(u.grid(), dp);
    l_with(&q, u)
}

pub fn l_with(q: &LQuadrature, u: &SPotential) -> f64 {
    let b = q.boundary(|x| u.trace_at(x));
    let i: f64 = q
        .interior_nodes
        .iter()
        .zip(&q.interior_weights)
        .map(|(&k, w)| w * u.node_value(k))
        .sum();
    b - i
}

/// L_A of an analytic function on the polytope, quadrature at spacing h.
pub fn l_functional_fn(
    poly: &std::sync::Arc<Polytope>,
    dp: &DensityPair,
    h: f64,
    f: impl Fn(&[f64]) -> f64,
) -> Result<f64> {
    let grid = Grid::new(poly.clone(), h)?;
    Ok(LQuadrature::new(&grid, dp).eval(f))
}

/// -int log det(u_ij) D + L_A(u). The Guillemin part of log det is
/// integrated analytically with collar refinement; the smooth remainder
/// log det(u_ij) - log det(v_ij) by the midpoint rule.
pub fn mabuchi(u: &SPotential, dp: &DensityPair, det_floor: f64) -> Result<f64> {
    let hf = u.hessian_field(det_floor)?;
    let grid = u.grid();
    let poly = u.polytope().clone();
    let n = u.dim();
    let guil = u.has_guillemin();
    let smooth: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let Some(d) = hf.det[i] else { return 0.0 };
            let x = grid.node(i);
            let dv = if guil {
                guillemin_hessian(&poly, &x).map_or(1.0, |h| linalg::det(&h, n))
            } else {
                1.0
            };
            dp.d.eval(&x) * (d.ln() - dv.ln())
        })
        .collect();
    let log_det_int = singular_integral(
        grid,
        &smooth,
        |x| {
            if !guil {
                return 0.0;
            }
            match guillemin_hessian(&poly, x) {
                Ok(h) => dp.d.eval(x) * linalg::det(&h, n).ln(),
                Err(_) => 0.0,
            }
        },
        DEFAULT_COLLAR,
    );
    Ok(-log_det_int + l_functional(u, dp))
}

/// Integral of f over the polytope: tensor 3-point Gauss rule on full
/// cells (exact for polynomials of degree 5 per axis), midpoint on cut cells.
pub fn gauss_interior(grid: &Grid, f: impl Fn(&[f64]) -> f64 + Sync) -> f64 {
    const X: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
    const W: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];
    let n = grid.dim();
    let h = grid.h();
    let full: f64 = h.iter().product();
    let wt = grid.weights();
    (0..grid.len())
        .into_par_iter()
        .filter(|&i| wt[i] > 0.0)
        .map(|i| {
            let c = grid.node(i);
            if (wt[i] - full).abs() > 1e-12 * full {
                return wt[i] * f(&c);
            }
            let mut acc = 0.0;
            let mut y = c.clone();
            for k in 0..3usize.pow(n as u32) {
                let mut r = k;
                let mut w = full;
                for a in 0..n {
                    let q = r % 3;
                    r /= 3;
                    y[a] = c[a] + 0.5 * h[a] * X[q];
                    w *= W[q];
                }
                acc += w * f(&y);
            }
            acc
        })
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

/// |L_A| on the affine basis {1, xi_1, ..., xi_n}, interior term by
/// gauss_interior.
pub fn affine_defect(poly: &std::sync::Arc<Polytope>, dp: &DensityPair, h: f64) -> Result<Vec<f64>> {
    let grid = Grid::new(poly.clone(), h)?;
    Ok(affine_defect_on(&grid, dp))
}

pub fn affine_defect_on(grid: &Grid, dp: &DensityPair) -> Vec<f64> {
    let poly = grid.polytope().expect("polytope-backed grid");
    let bq = BoundaryQuadrature::new(poly, grid.h_max());
    let l = |f: &(dyn Fn(&[f64]) -> f64 + Sync)| {
        bq.integrate(|x| f(x) * dp.d.eval(x)) - gauss_interior(grid, |x| f(x) * dp.a.eval(x) * dp.d.eval(x))
    };
    let mut out = vec![l(&|_| 1.0).abs()];
    for i in 0..poly.dim() {
        out.push(l(&|x: &[f64]| x[i]).abs());
    }
    out
}

/// Default defect tolerance 1e-6 (1 + |int A D|).
pub fn defect_tolerance(grid: &Grid, dp: &DensityPair) -> f64 {
    let q = LQuadrature::new(grid, dp);
    1e-6 * (1.0 + q.interior(|_| 1.0).abs())
}

/// Errors with RefusedAffineDefect when any defect exceeds `tol`.
pub fn require_affine_balance(defects: &[f64], tol: f64) -> Result<()> {
    if defects.iter().any(|d| *d > tol) {
        Err(Error::RefusedAffineDefect {
            defects: defects.to_vec(),
            tol,
        })
    } else {
        Ok(())
    }
}

/// The subset of a segment whose subgradient image is measured.
#[derive(Clone, Copy, Debug)]
pub enum SegmentSet {
    /// Open interval (a, b) in the segment parameter.
    Interval(f64, f64),
    Point(f64),
}

/// Length of the subgradient image of w over J, from one-sided
/// second-order slopes with step `s`.
pub fn ma_segment_measure(w: impl Fn(f64) -> f64, j: SegmentSet, s: f64) -> f64 {
    let right = |t: f64| (-3.0 * w(t) + 4.0 * w(t + s) - w(t + 2.0 * s)) / (2.0 * s);
    let left = |t: f64| (3.0 * w(t) - 4.0 * w(t - s) + w(t - 2.0 * s)) / (2.0 * s);
    match j {
        SegmentSet::Interval(a, b) => left(b) - right(a),
        SegmentSet::Point(t) => right(t) - left(t),
    }
}

/// Restriction of u to the segment p + t (q - p) / |q - p|, t in [0, |q - p|].
pub fn restrict<'a>(u: &'a SPotential, p: &'a [f64], q: &'a [f64]) -> impl Fn(f64) -> f64 + 'a {
    let len = p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    move |t: f64| {
        let x: Vec<f64> = p.iter().zip(q).map(|(a, b)| a + t * (b - a) / len).collect();
        u.value_at(&x)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryMass {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// int_boundary u dsigma against n lambda^-1 (max D / min D) vol(Delta).
pub fn boundary_mass_bound(u: &SPotential, dp: &DensityPair, lambda: f64) -> Result<BoundaryMass> {
    if !(lambda > 0.0) {
        return Err(Error::OutOfRange(format!(
            "boundary-mass bound needs lambda > 0, got {lambda}"
        )));
    }
    let grid = u.grid();
    let bq = BoundaryQuadrature::new(u.polytope(), grid.h_max());
    let lhs = bq.integrate(|x| u.trace_at(x));
    let mut dmax = f64::NEG_INFINITY;
    let mut dmin = f64::INFINITY;
    for x in grid
        .active_nodes()
        .into_iter()
        .map(|i| grid.node(i))
        .chain(bq.points.iter().cloned())
    {
        let d = dp.d.eval(&x);
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    let vol: f64 = grid.weights().iter().sum();
    let rhs = u.dim() as f64 / lambda * (dmax / dmin) * vol;
    Ok(BoundaryMass {
        lhs,
        rhs,
        holds: lhs <= rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::normalize_at;
    use std::sync::Arc;

    #[test]
    fn l_examples() {
        let iv = Arc::new(Polytope::interval(0.0, 1.0));
        let u = SPotential::guillemin(iv.clone(), 1.0 / 512.0, vec![0.5]).unwrap();
        let dp = DensityPair::constant(1.0, 2.0);
        assert!((l_functional(&u, &dp) - 1.0).abs() < 1e-3);
        let sq = Arc::new(Polytope::unit_square());
        let dp4 = DensityPair::constant(1.0, 4.0);
        assert!(l_functional_fn(&sq, &dp4, 1.0 / 64.0, |x| x[0]).unwrap().abs() < 1e-6);
        let dp0 = DensityPair::constant(1.0, 0.0);
        assert!((l_functional_fn(&sq, &dp0, 1.0 / 64.0, |_| 1.0).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mabuchi_guillemin_interval() {
        let iv = Arc::new(Polytope::interval(0.0, 1.0));
        let u = SPotential::guillemin(iv, 1.0 / 256.0, vec![0.5]).unwrap();
        let f = mabuchi(&u, &DensityPair::constant(1.0, 2.0), 1e-12).unwrap();
        assert!((f + 1.0).abs() < 5e-3, "{f}");
    }

    #[test]
    fn defects() {
        let iv = Arc::new(Polytope::interval(0.0, 1.0));
        let d = affine_defect(&iv, &DensityPair::constant(1.0, 2.0), 1.0 / 256.0).unwrap();
        assert!(d.iter().all(|x| *x < 1e-8));
        let sq = Arc::new(Polytope::unit_square());
        let d = affine_defect(&sq, &DensityPair::constant(1.0, 4.0), 1.0 / 64.0).unwrap();
        assert!(d.iter().all(|x| *x < 1e-6));
        let d = affine_defect(&sq, &DensityPair::constant(1.0, 0.0), 1.0 / 64.0).unwrap();
        assert!((d[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn segment_measures() {
        let m = ma_segment_measure(|t| 0.5 * t * t, SegmentSet::Interval(-1.0, 1.0), 1e-3);
        assert!((m - 2.0).abs() < 1e-9);
        let m = ma_segment_measure(|t: f64| t.abs(), SegmentSet::Point(0.0), 1e-3);
        assert!((m - 2.0).abs() < 1e-12);
        let m = ma_segment_measure(|t| 3.0 * t - 1.0, SegmentSet::Interval(-1.0, 1.0), 1e-3);
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn boundary_mass_interval() {
        let iv = Arc::new(Polytope::interval(0.0, 1.0));
        let u = normalize_at(&SPotential::guillemin(iv, 1.0 / 256.0, vec![0.5]).unwrap()).unwrap();
        let b = boundary_mass_bound(&u, &DensityPair::constant(1.0, 2.0), 0.5).unwrap();
        assert!((b.lhs - 2.0 * 2f64.ln()).abs() < 1e-10);
        assert!((b.rhs - 2.0).abs() < 1e-12 && b.holds);
    }
}
