use serde::Serialize;

use crate::error::Result;
use crate::linalg;
use crate::polytope::Polytope;

/// v = sum delta_k log delta_k and its exact derivatives.
#[derive(Clone, Debug, Serialize)]
pub struct GuilleminEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<f64>,
    pub det: f64,
}

pub fn guillemin_eval(p: &Polytope, xi: &[f64]) -> Result<GuilleminEval> {
    let d = p.require_interior(xi)?;
    let n = p.dim();
    let mut value = 0.0;
    let mut gradient = vec![0.0; n];
    let mut hessian = vec![0.0; n * n];
    for (f, &dk) in p.facets().iter().zip(&d) {
        let l = dk.ln();
        value += dk * l;
        for i in 0..n {
            gradient[i] += f.normal[i] * (1.0 + l);
            for j in 0..n {
                hessian[i * n + j] += f.normal[i] * f.normal[j] / dk;
            }
        }
    }
    let det = linalg::det(&hessian, n);
    Ok(GuilleminEval {
        value,
        gradient,
        hessian,
        det,
    })
}

/// Value only, extended by continuity to the closed polytope (0 log 0 = 0).
pub fn guillemin_trace(p: &Polytope, xi: &[f64]) -> f64 {
    p.facet_distances(xi)
        .iter()
        .map(|&d| if d > 0.0 { d * d.ln() } else { 0.0 })
        .sum()
}

pub fn guillemin_hessian(p: &Polytope, xi: &[f64]) -> Result<Vec<f64>> {
    let d = p.require_interior(xi)?;
    let n = p.dim();
    let mut h = vec![0.0; n * n];
    for (f, &dk) in p.facets().iter().zip(&d) {
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] += f.normal[i] * f.normal[j] / dk;
            }
        }
    }
    Ok(h)
}

/// det(v_ij) * prod_k delta_k. Identically 1 on boxes; in general smooth up
/// to the boundary and positive.
pub fn guillemin_det_product(p: &Polytope, xi: &[f64]) -> Result<f64> {
    let d = p.require_interior(xi)?;
    let h = guillemin_hessian(p, xi)?;
    Ok(linalg::det(&h, p.dim()) * d.iter().product::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn interval_and_square_values() {
        let iv = Polytope::interval(0.0, 1.0);
        let e = guillemin_eval(&iv, &[0.5]).unwrap();
        assert!((e.value + 2f64.ln() * 1.0).abs() < 1e-15);
        assert!((e.det - 4.0).abs() < 1e-14);
        let e = guillemin_eval(&iv, &[0.25]).unwrap();
        assert!((e.value - (0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln())).abs() < 1e-15);
        assert!((e.value + 0.5623).abs() < 1e-4);
        let sq = Polytope::unit_square();
        let e = guillemin_eval(&sq, &[0.5, 0.5]).unwrap();
        assert!((e.value + 2.0 * 2f64.ln()).abs() < 1e-14);
        assert!((e.det - 16.0).abs() < 1e-12);
        assert!(matches!(
            guillemin_eval(&sq, &[0.0, 0.5]),
            Err(Error::PointOutside { .. })
        ));
    }

    #[test]
    fn det_product_identity() {
        let iv = Polytope::interval(0.0, 1.0);
        assert!((guillemin_det_product(&iv, &[0.3]).unwrap() - 1.0).abs() < 1e-12);
        let sq = Polytope::unit_square();
        assert!((guillemin_det_product(&sq, &[0.1, 0.77]).unwrap() - 1.0).abs() < 1e-12);
        // the simplex factor is not constant, but tends to 1 at the vertex
        let tri = Polytope::simplex(2);
        let mut last = 0.0;
        for k in 1..8 {
            let t = 10f64.powi(-k);
            last = guillemin_det_product(&tri, &[t, t]).unwrap();
        }
        assert!((last - 1.0).abs() < 1e-6, "{last}");
    }
}
