//! F = D / det(u_ij), the cofactor field and the residual of the equation in
//! primal, cofactor and dual (Legendre) form.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretize::{FdOperator, Grid, GridFn, HessianField};
use crate::error::{Error, Result};
use crate::field::DensityPair;
use crate::legendre::{conjugate_point, ConvexSampler, PotentialSampler};
use crate::linalg;
use crate::potentials::SPotential;

pub const DEFAULT_DET_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Form {
    Primal,
    Cofactor,
    Dual,
}

/// F = D / det(u_ij) at every node with a Hessian.
pub fn mf_field(u: &SPotential, dp: &DensityPair, det_floor: f64) -> Result<GridFn> {
    let hf = u.hessian_field(det_floor)?;
    Ok(mf_from(u.grid(), &hf, dp))
}

fn mf_from(grid: &Arc<Grid>, hf: &HessianField, dp: &DensityPair) -> GridFn {
    GridFn::new_partial(
        grid.clone(),
        (0..grid.len())
            .map(|i| match hf.det[i] {
                Some(d) if grid.is_active(i) => dp.d.eval(&grid.node(i)) / d,
                _ => f64::NAN,
            })
            .collect(),
    )
}

/// U^{ij} = det(u) u^{ij} per node, with the divergence diagnostic
/// max_j |sum_i d_i U^{ij}| over `mask`.
#[derive(Clone, Debug)]
pub struct CofactorField {
    pub dim: usize,
    pub u: Vec<Option<Vec<f64>>>,
    pub divergence: Vec<Option<Vec<f64>>>,
    pub max_divergence: f64,
}

pub fn cofactor_field(u: &SPotential, det_floor: f64, mask: &[bool]) -> Result<CofactorField> {
    let hf = u.hessian_field(det_floor)?;
    let n = u.dim();
    let cof: Vec<Option<Vec<f64>>> = hf
        .hess
        .iter()
        .map(|h| h.as_ref().map(|m| linalg::cofactor(m, n)))
        .collect();
    let fd = u.fd();
    let divergence: Vec<Option<Vec<f64>>> = (0..cof.len())
        .into_par_iter()
        .map(|m| {
            if !mask[m] {
                return None;
            }
            let st = fd.gradient_stencils(m)?;
            let mut div = vec![0.0; n];
            for (i, s) in st.iter().enumerate() {
                for &(k, c) in s {
                    let uk = cof[k].as_ref()?;
                    for (j, d) in div.iter_mut().enumerate() {
                        *d += c * uk[i * n + j];
                    }
                }
            }
            Some(div)
        })
        .collect();
    let max_divergence = divergence
        .iter()
        .flatten()
        .map(|d| linalg::max_abs(d))
        .fold(0.0, f64::max);
    Ok(CofactorField {
        dim: n,
        u: cof,
        divergence,
        max_divergence,
    })
}

/// Residual field (NaN off the evaluation mask) and its sup norm.
#[derive(Clone, Debug)]
pub struct Residual {
    pub form: Form,
    pub field: GridFn,
    pub mask: Vec<bool>,
    pub sup: f64,
}

impl Residual {
    fn new(form: Form, field: GridFn, mask: Vec<bool>) -> Self {
        let sup = field
            .values()
            .iter()
            .zip(&mask)
            .filter(|(v, m)| **m && v.is_finite())
            .fold(0.0, |a: f64, (v, _)| a.max(v.abs()));
        Residual { form, field, mask, sup }
    }
}

/// Residual options: evaluation margin (default 5 h max|a_k|), det floor and
/// dual resolution (nodes per axis; default matches the primal grid).
#[derive(Clone, Debug)]
pub struct ResidualOptions {
    pub margin: Option<f64>,
    pub det_floor: f64,
    pub dual_shape: Option<Vec<usize>>,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        ResidualOptions {
            margin: None,
            det_floor: DEFAULT_DET_FLOOR,
            dual_shape: None,
        }
    }
}

/// Applies the FD Hessian rows at node m to a per-node matrix field,
/// returning sum_ij d_i d_j F^{ij}.
fn double_divergence(fd: &FdOperator, m: usize, field: &[Option<Vec<f64>>], n: usize) -> Option<f64> {
    let rows = fd.hessian_rows(m)?;
    let mut acc = 0.0;
    for (k, r) in rows {
        let fk = field[*k].as_ref()?;
        for ij in 0..n * n {
            acc += r[ij] * fk[ij];
        }
    }
    Some(acc)
}

pub fn abreu_residual(u: &SPotential, dp: &DensityPair, form: Form, opts: &ResidualOptions) -> Result<Residual> {
    let grid = u.grid().clone();
    let margin = opts.margin.unwrap_or_else(|| grid.default_margin());
    let mask = grid.eroded_mask(margin);
    let n = u.dim();
    let hf = u.hessian_field(opts.det_floor)?;
    let fd = u.fd();
    let d_at: Vec<f64> = (0..grid.len()).map(|i| dp.d.eval(&grid.node(i))).collect();
    let a_at = |i: usize| dp.a.eval(&grid.node(i));
    let values: Vec<f64> = match form {
        Form::Primal => {
            let dinv: Vec<Option<Vec<f64>>> = hf
                .inv
                .iter()
                .enumerate()
                .map(|(i, inv)| inv.as_ref().map(|m| m.iter().map(|x| x * d_at[i]).collect()))
                .collect();
            (0..grid.len())
                .into_par_iter()
                .map(|m| {
                    if !mask[m] {
                        return f64::NAN;
                    }
                    double_divergence(fd, m, &dinv, n).map_or(f64::NAN, |s| s / d_at[m] + a_at(m))
                })
                .collect()
        }
        Form::Cofactor => {
            let mf = mf_from(&grid, &hf, dp);
            (0..grid.len())
                .into_par_iter()
                .map(|m| {
                    if !mask[m] {
                        return f64::NAN;
                    }
                    let (Some(h), Some(hess_f)) = (hf.hess[m].as_ref(), fd.hessian_at(m, mf.values())) else {
                        return f64::NAN;
                    };
                    if !hess_f.iter().all(|x| x.is_finite()) {
                        return f64::NAN;
                    }
                    let cof = linalg::cofactor(h, n);
                    let s: f64 = cof.iter().zip(&hess_f).map(|(a, b)| a * b).sum();
                    (s + a_at(m) * d_at[m]) / d_at[m]
                })
                .collect()
        }
        Form::Dual => return dual_residual(u, dp, margin, mask, opts),
    };
    let field = GridFn::new_partial(grid, values);
    Ok(Residual::new(form, field, mask))
}

/// Dual residual f^{ij}(log F)_ij + f^{ij}(log F)_i (log D)_j + A on a dual
/// box grid, pulled back to the primal mask through x = grad u(xi).
/// f^{ij} = u_ij and log F = log D - log det u_ij are taken at the argmax
/// xi(x), so only the outer derivatives are differenced in x.
fn dual_residual(
    u: &SPotential,
    dp: &DensityPair,
    margin: f64,
    mask: Vec<bool>,
    opts: &ResidualOptions,
) -> Result<Residual> {
    let grid = u.grid().clone();
    let n = u.dim();
    // gradient image of a slightly larger region than the mask
    let inner = 0.5 * margin;
    let sampler = PotentialSampler::new(u, inner.min(margin)).smooth();
    let samples = sampler.samples();
    if samples.is_empty() {
        return Err(Error::DualUnavailable("no primal nodes inside the dual margin".into()));
    }
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for i in 0..grid.len() {
        if mask[i] {
            let g = u
                .node_gradient(i)
                .ok_or_else(|| Error::DualUnavailable(format!("no gradient at node {i}")))?;
            for a in 0..n {
                lo[a] = lo[a].min(g[a]);
                hi[a] = hi[a].max(g[a]);
            }
        }
    }
    let shape: Vec<usize> = opts.dual_shape.clone().unwrap_or_else(|| grid.shape().to_vec());
    // pad by four dual cells so the pullback points have full stencils
    for a in 0..n {
        let w = (hi[a] - lo[a]).max(1e-9);
        let pad = 4.0 * w / (shape[a].max(9) - 8) as f64;
        lo[a] -= pad;
        hi[a] += pad;
    }
    let skeleton = Grid::on_box(lo.clone(), hi.clone(), shape.clone())?;
    let pts: Vec<Option<(Vec<f64>, bool)>> = (0..skeleton.len())
        .into_par_iter()
        .map(|j| {
            let x = skeleton.node(j);
            conjugate_point(&sampler as &dyn ConvexSampler, &samples, &x).map(|p| (p.argmax, p.clipped))
        })
        .collect();
    let inside: Vec<bool> = pts.iter().map(|p| matches!(p, Some((_, false)))).collect();
    let dgrid = Arc::new(Grid::on_box_with_mask(lo, hi, shape, &inside)?);
    let dfd = FdOperator::new(dgrid.clone()).map_err(|e| Error::DualUnavailable(format!("dual grid: {e}")))?;
    let nan = f64::NAN;
    let mut log_f = vec![nan; dgrid.len()];
    let mut log_d = vec![nan; dgrid.len()];
    let mut fij: Vec<Option<Vec<f64>>> = vec![None; dgrid.len()];
    let mut a_val = vec![nan; dgrid.len()];
    for j in 0..dgrid.len() {
        if !inside[j] {
            continue;
        }
        let xi = &pts[j].as_ref().expect("inside").0;
        let Ok(h) = u.hessian_at_smooth(xi) else { continue };
        let det = linalg::det(&h, n);
        if !(det > opts.det_floor) {
            continue;
        }
        let d = dp.d.eval(xi);
        log_d[j] = d.ln();
        log_f[j] = d.ln() - det.ln();
        a_val[j] = dp.a.eval(xi);
        fij[j] = Some(h);
    }
    let r_dual: Vec<f64> = (0..dgrid.len())
        .into_par_iter()
        .map(|j| {
            let Some(f) = fij[j].as_ref() else { return nan };
            let (Some(hl), Some(gl), Some(gd)) = (
                dfd.hessian_at(j, &log_f),
                dfd.gradient_at(j, &log_f),
                dfd.gradient_at(j, &log_d),
            ) else {
                return nan;
            };
            let mut s = 0.0;
            for a in 0..n {
                for b in 0..n {
                    s += f[a * n + b] * (hl[a * n + b] + gl[a] * gd[b]);
                }
            }
            s + a_val[j]
        })
        .collect();
    let rfield = GridFn::new_partial(dgrid, r_dual);
    let mut missing = 0usize;
    let values: Vec<f64> = (0..grid.len())
        .map(|i| {
            if !mask[i] {
                return nan;
            }
            let x = u.node_gradient(i).expect("checked above");
            match rfield.try_interpolate(&x) {
                Some(v) => v,
                None => {
                    missing += 1;
                    nan
                }
            }
        })
        .collect();
    if missing > 0 {
        return Err(Error::DualUnavailable(format!(
            "{missing} masked node(s) map outside the dual region"
        )));
    }
    Ok(Residual::new(Form::Dual, GridFn::new_partial(grid, values), mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Polynomial, ScalarField};
    use crate::polytope::Polytope;

    #[test]
    fn guillemin_interval_mf_and_residual() {
        let u = SPotential::guillemin(Arc::new(Polytope::interval(0.0, 1.0)), 1.0 / 1024.0, vec![0.5]).unwrap();
        let dp = DensityPair::constant(1.0, 2.0);
        let f = mf_field(&u, &dp, 1e-12).unwrap();
        let g = u.grid();
        let mid = g.nearest_active(&[0.5]).unwrap();
        let x = g.node(mid)[0];
        assert!((f.get(mid) - x * (1.0 - x)).abs() < 1e-12);
        assert!(f.get(0) <= 2.0 * g.h()[0]);
        let opts = ResidualOptions {
            margin: Some(0.1),
            ..Default::default()
        };
        let r = abreu_residual(&u, &dp, Form::Primal, &opts).unwrap();
        assert!(r.sup <= 1e-4, "{}", r.sup);
        let rc = abreu_residual(&u, &dp, Form::Cofactor, &opts).unwrap();
        assert!(rc.sup <= 1e-4, "{}", rc.sup);
    }

    #[test]
    fn guillemin_square_residual() {
        let u = SPotential::guillemin(Arc::new(Polytope::unit_square()), 1.0 / 256.0, vec![0.5, 0.5]).unwrap();
        let dp = DensityPair::constant(1.0, 4.0);
        let opts = ResidualOptions {
            margin: Some(0.1),
            ..Default::default()
        };
        let r = abreu_residual(&u, &dp, Form::Primal, &opts).unwrap();
        assert!(r.sup <= 1e-3, "{}", r.sup);
    }

    #[test]
    fn quadratic_exact_and_affine_invariant() {
        let p = Arc::new(Polytope::unit_square());
        let grid = Arc::new(Grid::new(p, 1.0 / 32.0).unwrap());
        let phi = GridFn::from_fn(grid.clone(), |x| 0.5 * (x[0] * x[0] + x[1] * x[1]));
        let u = SPotential::build(phi.clone(), vec![0.5, 0.5], false, None).unwrap();
        let dp = DensityPair::constant(1.0, 0.0);
        let r = abreu_residual(&u, &dp, Form::Primal, &ResidualOptions::default()).unwrap();
        assert!(r.sup < 1e-9);
        let dp2 = DensityPair::new(
            ScalarField::Polynomial(Polynomial::new(vec![(1.0, vec![0, 0]), (0.3, vec![1, 1])])),
            ScalarField::Constant(1.5),
        );
        let u1 = SPotential::build(
            GridFn::from_fn(grid.clone(), |x| {
                x[0].powi(4) + x[0] * x[0] + x[1] * x[1] + x[0] * x[1] * 0.2
            }),
            vec![0.5, 0.5],
            false,
            None,
        )
        .unwrap();
        let mut p2 = u1.phi().clone();
        p2.add_affine(-1.0, &[0.5, 0.25]);
        let u2 = u1.with_phi(p2).unwrap();
        let r1 = abreu_residual(&u1, &dp2, Form::Primal, &ResidualOptions::default()).unwrap();
        let r2 = abreu_residual(&u2, &dp2, Form::Primal, &ResidualOptions::default()).unwrap();
        for (a, b) in r1.field.values().iter().zip(r2.field.values()) {
            if a.is_finite() {
                assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
            }
        }
        let dp3 = DensityPair::new(dp2.d.clone(), ScalarField::Constant(2.5));
        let r3 = abreu_residual(&u1, &dp3, Form::Primal, &ResidualOptions::default()).unwrap();
        for (a, b) in r1.field.values().iter().zip(r3.field.values()) {
            if a.is_finite() {
                assert!((b - a - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cofactor_trivial_cases() {
        let grid = Arc::new(Grid::new(Arc::new(Polytope::interval(0.0, 1.0)), 1.0 / 64.0).unwrap());
        let u = SPotential::new(GridFn::zeros(grid.clone()), vec![0.5]).unwrap();
        let c = cofactor_field(&u, 1e-12, &grid.eroded_mask(0.05)).unwrap();
        assert_eq!(c.max_divergence, 0.0);
        let grid = Arc::new(Grid::new(Arc::new(Polytope::unit_square()), 1.0 / 16.0).unwrap());
        let q = Arc::new(Polynomial::new(vec![(1.0, vec![2, 0]), (1.0, vec![0, 2])]));
        let u = SPotential::analytic(grid.clone(), q, vec![0.5, 0.5], false).unwrap();
        let c = cofactor_field(&u, 1e-12, &grid.eroded_mask(0.2)).unwrap();
        assert!(c.max_divergence <= 1e-10);
    }

    #[test]
    fn dual_guillemin_interval() {
        let u = SPotential::guillemin(Arc::new(Polytope::interval(0.0, 1.0)), 1.0 / 256.0, vec![0.5]).unwrap();
        let dp = DensityPair::constant(1.0, 2.0);
        let opts = ResidualOptions {
            margin: Some(0.1),
            ..Default::default()
        };
        let r = abreu_residual(&u, &dp, Form::Dual, &opts).unwrap();
        assert!(r.sup < 1e-2, "{}", r.sup);
    }
}
