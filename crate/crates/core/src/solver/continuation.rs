use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{solve_from, SolveConfig, SolveReport};
use crate::discretize::{FdOperator, GridFn};
use crate::error::Result;
use crate::field::{DensityPair, Polynomial, ScalarField};
use crate::functionals::{boundary_mass_bound, stability_lambda, BoundaryMass, FamilyConfig};
use crate::polytope::Polytope;
use crate::potentials::SPotential;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationConfig {
    /// Omega = {delta_k >= omega_margin} for the gap diagnostics.
    pub omega_margin: f64,
    pub family: FamilyConfig,
    pub seed: u64,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        ContinuationConfig {
            omega_margin: 0.1,
            family: FamilyConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuationRow {
    pub k: usize,
    pub error: Option<String>,
    pub refused: bool,
    pub converged: bool,
    pub warm_start: bool,
    /// Gaps to the previous successful iterate on Omega.
    pub sup_gap: Option<f64>,
    pub third_derivative_gap: Option<f64>,
    pub boundary_mass: Option<BoundaryMass>,
    pub lambda_hat: Option<f64>,
    /// Solver success implies lambda_hat > 0.
    pub lambda_consistent: Option<bool>,
    pub report: Option<SolveReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuationReport {
    pub rows: Vec<ContinuationRow>,
    pub gaps_strictly_decreasing: bool,
    pub final_gap: Option<f64>,
    pub boundary_mass_uniform: bool,
}

impl ContinuationReport {
    pub fn to_csv(&self) -> String {
        let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.12e}"));
        let mut s = String::from(
            "k,sup_gap,third_derivative_gap,boundary_mass,boundary_mass_bound,lambda_hat,lambda_consistent,status\n",
        );
        for r in &self.rows {
            let status = match (&r.error, r.converged) {
                (Some(_), _) if r.refused => "refused",
                (Some(_), _) => "error",
                (None, true) => "converged",
                (None, false) => "not_converged",
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.k,
                f(r.sup_gap),
                f(r.third_derivative_gap),
                f(r.boundary_mass.as_ref().map(|b| b.lhs)),
                f(r.boundary_mass.as_ref().map(|b| b.rhs)),
                f(r.lambda_hat),
                r.lambda_consistent.map_or(String::new(), |b| b.to_string()),
                status
            ));
        }
        s
    }
}

/// A_k = 2 + (6 xi^2 - 6 xi + 1) / k on (0, 1): the perturbation has zero
/// L on affine functions, so every member is solvable, and A_k -> 2.
pub fn balanced_interval_sequence(k_max: usize) -> Vec<DensityPair> {
    (1..=k_max)
        .map(|k| {
            let c = 1.0 / k as f64;
            let a = Polynomial::new(vec![(2.0 + c, vec![0]), (-6.0 * c, vec![1]), (6.0 * c, vec![2])]);
            DensityPair::new(ScalarField::Constant(1.0), ScalarField::Polynomial(a))
        })
        .collect()
}

/// Max over Omega of all FD third derivatives of a grid function.
fn third_derivative_sup(fd: &FdOperator, g: &GridFn, omega: &[bool]) -> f64 {
    let grid = g.grid();
    let n = grid.dim();
    let hess: Vec<Option<Vec<f64>>> = (0..grid.len())
        .into_par_iter()
        .map(|i| fd.hessian_at(i, g.values()))
        .collect();
    let mut sup: f64 = 0.0;
    for c in 0..n * n {
        let vals: Vec<f64> = hess.iter().map(|h| h.as_ref().map_or(f64::NAN, |h| h[c])).collect();
        for (i, &m) in omega.iter().enumerate() {
            if !m {
                continue;
            }
            if let Some(d) = fd.gradient_at(i, &vals) {
                for x in d.into_iter().filter(|x| x.is_finite()) {
                    sup = sup.max(x.abs());
                }
            }
        }
    }
    sup
}

/// Solves the sequence in order, warm-starting each solve from the previous
/// success and falling back to a cold start after a failure.
pub fn continuation(
    poly: &Arc<Polytope>,
    seq: &[DensityPair],
    cfg: &SolveConfig,
    ccfg: &ContinuationConfig,
) -> Result<(Vec<Option<SPotential>>, ContinuationReport)> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut potentials: Vec<Option<SPotential>> = Vec::new();
    let mut prev: Option<SPotential> = None;
    let mut last_failed = false;
    for (idx, dp) in seq.iter().enumerate() {
        let k = idx + 1;
        let warm = if last_failed {
            None
        } else {
            prev.as_ref().map(|u| u.phi())
        };
        let warm_start = warm.is_some();
        match solve_from(poly, dp, cfg, warm) {
            Err(e) => {
                rows.push(ContinuationRow {
                    k,
                    error: Some(format!("{} error: {e}", e.module())),
                    refused: e.is_refusal(),
                    converged: false,
                    warm_start,
                    sup_gap: None,
                    third_derivative_gap: None,
                    boundary_mass: None,
                    lambda_hat: None,
                    lambda_consistent: None,
                    report: None,
                });
                potentials.push(None);
                last_failed = true;
            }
            Ok((u, report)) => {
                let omega = u.grid().eroded_mask(ccfg.omega_margin);
                let (sup_gap, third) = match &prev {
                    Some(p) => {
                        let diff: Vec<f64> = u
                            .phi()
                            .values()
                            .iter()
                            .zip(p.phi().values())
                            .map(|(a, b)| a - b)
                            .collect();
                        let diff = GridFn::new(u.grid().clone(), diff)?;
                        (
                            Some(diff.max_abs_on(&omega)),
                            Some(third_derivative_sup(u.fd(), &diff, &omega)),
                        )
                    }
                    None => (None, None),
                };
                let lam = stability_lambda(poly, dp, &ccfg.family, ccfg.seed, Some(u.p_o().to_vec()))
                    .ok()
                    .map(|r| r.lambda_hat);
                let bm = lam.and_then(|l| boundary_mass_bound(&u, dp, l).ok());
                rows.push(ContinuationRow {
                    k,
                    error: None,
                    refused: false,
                    converged: report.converged,
                    warm_start,
                    sup_gap,
                    third_derivative_gap: third,
                    boundary_mass: bm,
                    lambda_hat: lam,
                    lambda_consistent: lam.map(|l| !report.converged || l > 0.0),
                    report: Some(report),
                });
                prev = Some(u.clone());
                potentials.push(Some(u));
                last_failed = false;
            }
        }
    }
    let gaps: Vec<f64> = rows.iter().filter_map(|r| r.sup_gap).collect();
    // both flags need data: no gaps or no solved rows means false
    let gaps_strictly_decreasing = gaps.len() >= 2 && gaps.windows(2).all(|w| w[1] < w[0]);
    let solved: Vec<&ContinuationRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let boundary_mass_uniform =
        !solved.is_empty() && solved.iter().all(|r| r.boundary_mass.as_ref().is_some_and(|b| b.holds));
    Ok((
        potentials,
        ContinuationReport {
            final_gap: gaps.last().copied(),
            rows,
            gaps_strictly_decreasing,
            boundary_mass_uniform,
        },
    ))
}
