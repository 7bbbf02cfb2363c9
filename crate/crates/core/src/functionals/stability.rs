//! Search for the uniform stability constant over a seeded family of
//! normalized piecewise-linear convex functions.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{affine_defect_on, require_affine_balance, LQuadrature};
use crate::discretize::Grid;
use crate::error::{Error, Result};
use crate::field::DensityPair;
use crate::polytope::Polytope;
use crate::rng::StreamSplitter;

/// Below this boundary mass a member is treated as affine and skipped.
const MIN_BOUNDARY_MASS: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyConfig {
    pub max_kinks: usize,
    /// Members drawn per kink count.
    pub samples: usize,
    pub slope_min: f64,
    pub slope_max: f64,
    /// Quadrature spacing; None picks one from the dimension.
    pub h: Option<f64>,
    pub allow_affine_defect: bool,
    pub defect_tol: Option<f64>,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            max_kinks: 2,
            samples: 256,
            slope_min: 0.5,
            slope_max: 2.0,
            h: None,
            allow_affine_defect: false,
            defect_tol: None,
        }
    }
}

impl FamilyConfig {
    pub fn spacing(&self, dim: usize) -> f64 {
        self.h.unwrap_or(match dim {
            1 => 1.0 / 1024.0,
            2 => 1.0 / 64.0,
            _ => 1.0 / 16.0,
        })
    }
}

/// max(0, <b, xi - q>).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kink {
    pub b: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlFunction {
    pub kinks: Vec<Kink>,
}

impl PlFunction {
    pub fn eval(&self, xi: &[f64]) -> f64 {
        self.kinks
            .iter()
            .map(|k| {
                let s: f64 = k.b.iter().zip(xi).zip(&k.q).map(|((b, x), q)| b * (x - q)).sum();
                s.max(0.0)
            })
            .sum()
    }

    pub fn scaled(&self, c: f64) -> PlFunction {
        PlFunction {
            kinks: self
                .kinks
                .iter()
                .map(|k| Kink {
                    b: k.b.iter().map(|b| b * c).collect(),
                    q: k.q.clone(),
                })
                .collect(),
        }
    }

    /// L_A(u) / int u D dsigma, or None when the boundary mass vanishes.
    pub fn ratio(&self, q: &LQuadrature) -> Option<f64> {
        let b = q.boundary(|x| self.eval(x));
        if b <= MIN_BOUNDARY_MASS {
            return None;
        }
        Some((b - q.interior(|x| self.eval(x))) / b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityReport {
    pub label: String,
    pub lambda_hat: f64,
    pub witness: PlFunction,
    /// (kink count, member index) of the witness.
    pub witness_member: (usize, usize),
    pub affine_defect: Vec<f64>,
    pub defect_tol: f64,
    pub defect_allowed: bool,
    pub samples: usize,
    pub evaluated: usize,
    pub max_kinks: usize,
    pub seed: u64,
    pub p_o: Vec<f64>,
    pub h: f64,
}

fn sample_point(poly: &Polytope, rng: &mut impl Rng) -> Vec<f64> {
    let (lo, hi) = poly.bounding_box();
    loop {
        let x: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| rng.random_range(*a..*b)).collect();
        if poly.facet_distances(&x).iter().all(|d| *d > 0.0) {
            return x;
        }
    }
}

/// Member (k, i) of the family. Each member has its own random stream, so
/// growing the family only appends members.
pub fn family_member(poly: &Polytope, cfg: &FamilyConfig, seed: u64, p_o: &[f64], k: usize, i: usize) -> PlFunction {
    let mut rng = StreamSplitter::new(seed).indexed("pl-family", &[k as u64, i as u64]);
    let n = poly.dim();
    let kinks = (0..k)
        .map(|_| {
            let q = sample_point(poly, &mut rng);
            let mut dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-300);
            let slope = rng.random_range(cfg.slope_min..=cfg.slope_max);
            dir.iter_mut().for_each(|d| *d *= slope / norm);
            let at_po: f64 = dir.iter().zip(p_o).zip(&q).map(|((b, p), q)| b * (p - q)).sum();
            if at_po > 0.0 {
                dir.iter_mut().for_each(|d| *d = -*d);
            }
            Kink { b: dir, q }
        })
        .collect();
    PlFunction { kinks }
}

/// Minimum of L_A(u) / int u D dsigma over the family. The result is an
/// upper bound for the true infimum and is labelled as such.
pub fn stability_lambda(
    poly: &Arc<Polytope>,
    dp: &DensityPair,
    family: &FamilyConfig,
    seed: u64,
    p_o: Option<Vec<f64>>,
) -> Result<StabilityReport> {
    let p_o = match p_o {
        Some(p) => poly.require_interior(&p)?,
        None => poly.vertex_centroid(),
    };
    if family.max_kinks == 0 || family.samples == 0 {
        return Err(Error::config("family", "max_kinks and samples must be positive"));
    }
    if !(family.slope_min > 0.0 && family.slope_max >= family.slope_min) {
        return Err(Error::config("family.slope", "need 0 < slope_min <= slope_max"));
    }
    let h = family.spacing(poly.dim());
    let grid = Grid::new(poly.clone(), h)?;
    let q = LQuadrature::new(&grid, dp);
    let defects = affine_defect_on(&grid, dp);
    let tol = family
        .defect_tol
        .unwrap_or_else(|| 1e-6 * (1.0 + q.interior(|_| 1.0).abs()));
    if !family.allow_affine_defect {
        require_affine_balance(&defects, tol)?;
    }

    let index: Vec<(usize, usize)> = (1..=family.max_kinks)
        .flat_map(|k| (0..family.samples).map(move |i| (k, i)))
        .collect();
    let ratios: Vec<Option<f64>> = index
        .par_iter()
        .map(|&(k, i)| family_member(poly, family, seed, &p_o, k, i).ratio(&q))
        .collect();
    let mut best: Option<(f64, usize)> = None;
    let mut evaluated = 0;
    for (j, r) in ratios.iter().enumerate() {
        if let Some(r) = *r {
            evaluated += 1;
            if best.is_none_or(|(b, _)| r < b) {
                best = Some((r, j));
            }
        }
    }
    let Some((lambda_hat, j)) = best else {
        return Err(Error::OutOfRange("no family member has positive boundary mass".into()));
    };
    let (k, i) = index[j];
    Ok(StabilityReport {
        label: "family infimum".into(),
        lambda_hat,
        witness: family_member(poly, family, seed, &p_o, k, i),
        witness_member: (k, i),
        affine_defect: defects,
        defect_tol: tol,
        defect_allowed: family.allow_affine_defect,
        samples: index.len(),
        evaluated,
        max_kinks: family.max_kinks,
        seed,
        p_o,
        h,
    })
}

/// Re-evaluates a witness ratio on the quadrature used for the report.
pub fn replay_witness(poly: &Arc<Polytope>, dp: &DensityPair, report: &StabilityReport) -> Result<Option<f64>> {
    let grid = Grid::new(poly.clone(), report.h)?;
    Ok(report.witness.ratio(&LQuadrature::new(&grid, dp)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interval() -> Arc<Polytope> {
        Arc::new(Polytope::interval(0.0, 1.0))
    }

    #[test]
    fn single_kink_ratio() {
        let grid = Grid::new(interval(), 1.0 / 1024.0).unwrap();
        let q = LQuadrature::new(&grid, &DensityPair::constant(1.0, 2.0));
        for c in [0.5, 0.6, 0.8] {
            let u = PlFunction {
                kinks: vec![Kink {
                    b: vec![1.0],
                    q: vec![c],
                }],
            };
            assert!((u.ratio(&q).unwrap() - c).abs() < 1e-5);
            let r3 = u.scaled(3.0).ratio(&q).unwrap();
            assert!((r3 - u.ratio(&q).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_lambda() {
        let fam = FamilyConfig::default();
        let r = stability_lambda(&interval(), &DensityPair::constant(1.0, 2.0), &fam, 1, Some(vec![0.5])).unwrap();
        assert!((r.lambda_hat - 0.5).abs() < 0.02, "{}", r.lambda_hat);
        let replay = replay_witness(&interval(), &DensityPair::constant(1.0, 2.0), &r)
            .unwrap()
            .unwrap();
        assert!((replay - r.lambda_hat).abs() < 1e-10);
    }

    #[test]
    fn unbalanced_refused_unless_allowed() {
        let dp = DensityPair::constant(1.0, 6.0);
        let mut fam = FamilyConfig::default();
        let e = stability_lambda(&interval(), &dp, &fam, 1, Some(vec![0.5])).unwrap_err();
        assert!(matches!(e, Error::RefusedAffineDefect { .. }));
        fam.allow_affine_defect = true;
        let r = stability_lambda(&interval(), &dp, &fam, 1, Some(vec![0.5])).unwrap();
        assert!(r.lambda_hat <= -0.45, "{}", r.lambda_hat);
    }

    #[test]
    fn monotone_in_family_size() {
        let sq = Arc::new(Polytope::unit_square());
        let dp = DensityPair::constant(1.0, 4.0);
        let small = FamilyConfig {
            samples: 32,
            max_kinks: 1,
            ..Default::default()
        };
        let big = FamilyConfig {
            samples: 64,
            max_kinks: 2,
            ..Default::default()
        };
        let a = stability_lambda(&sq, &dp, &small, 3, None).unwrap();
        let b = stability_lambda(&sq, &dp, &big, 3, None).unwrap();
        assert!(b.lambda_hat <= a.lambda_hat);
    }
}
