//! Damped Newton minimization of the discretized Mabuchi functional, and
//! warm-started continuation over a sequence of A.

mod continuation;
mod objective;

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discretize::quadrature::interior_integral_fn;
use crate::discretize::{Grid, GridFn};
use crate::error::{Error, Result};
use crate::estimates::{det_lower_report, EstimateReport};
use crate::field::DensityPair;
use crate::functionals::{self, affine_defect, require_affine_balance};
use crate::operator::{abreu_residual, Form, ResidualOptions, DEFAULT_DET_FLOOR};
use crate::polytope::Polytope;
use crate::potentials::{normalize_at, SPotential};
use crate::rng::StreamSplitter;

pub use continuation::{
    balanced_interval_sequence, continuation, ContinuationConfig, ContinuationReport, ContinuationRow,
};
use objective::{lanczos_min, pcg, Objective};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub h: f64,
    /// Residual and determinant reporting margin; default 5 h max|a_k|.
    pub margin: Option<f64>,
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub backtracking: f64,
    pub min_step: f64,
    pub armijo: f64,
    /// On max |projected gradient| / cell volume.
    pub gradient_tol: f64,
    /// Default 1e-3 (1 + sup|A|).
    pub residual_tol: Option<f64>,
    pub identity_tol: f64,
    pub det_floor: f64,
    pub cg_tol: f64,
    pub cg_max_iterations: Option<usize>,
    pub p_o: Option<Vec<f64>>,
    pub defect_tol: Option<f64>,
    /// Lanczos PSD probe every this many iterations (0 = final iterate only).
    pub psd_probe_every: usize,
    pub psd_probe_steps: usize,
    pub dual_residual: bool,
    pub seed: u64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            h: 1.0 / 64.0,
            margin: None,
            max_iterations: 100,
            initial_damping: 1.0,
            backtracking: 0.5,
            min_step: 1e-10,
            armijo: 1e-4,
            gradient_tol: 1e-6,
            residual_tol: None,
            identity_tol: 1e-3,
            det_floor: DEFAULT_DET_FLOOR,
            cg_tol: 1e-8,
            cg_max_iterations: None,
            p_o: None,
            defect_tol: None,
            psd_probe_every: 5,
            psd_probe_steps: 30,
            dual_residual: true,
            seed: 0,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h", self.h),
            ("initial_damping", self.initial_damping),
            ("min_step", self.min_step),
            ("armijo", self.armijo),
            ("gradient_tol", self.gradient_tol),
            ("identity_tol", self.identity_tol),
            ("det_floor", self.det_floor),
            ("cg_tol", self.cg_tol),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("solver.{k}"), "must be positive"));
            }
        }
        if !(self.backtracking > 0.0 && self.backtracking < 1.0) {
            return Err(Error::config("solver.backtracking", "must lie in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("solver.max_iterations", "must be positive"));
        }
        for (k, v) in [
            ("margin", self.margin),
            ("residual_tol", self.residual_tol),
            ("defect_tol", self.defect_tol),
        ] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(Error::config(format!("solver.{k}"), "must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub functional: f64,
    pub gradient: f64,
    pub step: f64,
    pub cg_iterations: usize,
    pub det_min: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualNorms {
    pub primal: f64,
    pub cofactor: f64,
    pub dual: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PsdProbe {
    pub iteration: usize,
    pub min_ritz: f64,
    pub max_ritz: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    /// Line search fell below min_step with the gradient above tolerance.
    pub stalled: bool,
    pub iterations: usize,
    pub mabuchi: f64,
    pub gradient: f64,
    pub residual: ResidualNorms,
    pub residual_tol: f64,
    pub l_functional: f64,
    pub n_integral_d: f64,
    pub identity_gap: f64,
    pub det_min: f64,
    pub det_max: f64,
    pub margin: f64,
    pub descent_violations: usize,
    pub psd_probes: Vec<PsdProbe>,
    pub affine_defect: Vec<f64>,
    pub p_o: Vec<f64>,
    pub h: f64,
    pub unknowns: usize,
    pub history: Vec<IterationRecord>,
    pub estimates: Vec<EstimateReport>,
}

/// Solves from phi = 0.
pub fn solve(poly: &Arc<Polytope>, dp: &DensityPair, cfg: &SolveConfig) -> Result<(SPotential, SolveReport)> {
    solve_from(poly, dp, cfg, None)
}

/// Solves from a given initial phi (warm start) or from phi = 0.
pub fn solve_from(
    poly: &Arc<Polytope>,
    dp: &DensityPair,
    cfg: &SolveConfig,
    init: Option<&GridFn>,
) -> Result<(SPotential, SolveReport)> {
    cfg.validate()?;
    let p_o = match &cfg.p_o {
        Some(p) => poly.require_interior(p)?,
        None => poly.vertex_centroid(),
    };
    let grid = Arc::new(Grid::new(poly.clone(), cfg.h)?);
    let defects = affine_defect(poly, dp, cfg.h)?;
    let tol = cfg
        .defect_tol
        .unwrap_or_else(|| functionals::defect_tolerance(&grid, dp));
    require_affine_balance(&defects, tol)?;

    let phi0 = match init {
        Some(g) if g.grid().same_layout(&grid) => GridFn::new(grid.clone(), g.values().to_vec())?,
        _ => GridFn::zeros(grid.clone()),
    };
    let u0 = SPotential::new(phi0, p_o.clone())?;
    let obj = Objective::new(&u0, dp, cfg.det_floor)?;
    let mut phi = u0.phi().values().to_vec();
    let mut st = obj.state(&phi).ok_or_else(|| degenerate(&u0, cfg.det_floor))?;

    let cell: f64 = grid.h().iter().product();
    let cg_max = cfg.cg_max_iterations.unwrap_or(obj.len().max(200) * 4);
    let streams = StreamSplitter::new(cfg.seed);
    let mut probe_rng = streams.stream("lanczos");
    let mut probe = |st: &objective::State, it: usize| -> PsdProbe {
        let start: Vec<f64> = (0..obj.len()).map(|_| StandardNormal.sample(&mut probe_rng)).collect();
        let (lo, hi) = lanczos_min(&obj, st, start, cfg.psd_probe_steps);
        PsdProbe {
            iteration: it,
            min_ritz: lo,
            max_ritz: hi,
        }
    };

    let mut history = Vec::new();
    let mut psd_probes = Vec::new();
    let mut stalled = false;
    let mut iterations = 0;
    let mut descent_violations = 0;
    let mut grad_norm;
    loop {
        let mut g = obj.gradient(&st);
        obj.project(&mut g);
        grad_norm = g.iter().fold(0.0f64, |a, b| a.max(b.abs())) / cell;
        if cfg.psd_probe_every > 0 && iterations % cfg.psd_probe_every == 0 {
            psd_probes.push(probe(&st, iterations));
        }
        if grad_norm <= cfg.gradient_tol || iterations >= cfg.max_iterations {
            break;
        }
        let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        let (dir, cg_its) = pcg(&obj, &st, &rhs, cfg.cg_tol, cg_max);
        let slope = crate::linalg::dot(&g, &dir);
        // Newton decrement at roundoff level: further steps cannot be
        // resolved by the functional values.
        if -slope <= 1e-15 * (1.0 + st.value.abs()) {
            break;
        }
        let mut t = cfg.initial_damping;
        let accepted = loop {
            let trial = obj.scatter(&phi, &dir, t);
            if let Some(s) = obj.state(&trial) {
                if s.value <= st.value + cfg.armijo * t * slope && s.value < st.value {
                    break Some((trial, s));
                }
            }
            t *= cfg.backtracking;
            if t < cfg.min_step {
                break None;
            }
        };
        iterations += 1;
        match accepted {
            Some((trial, s)) => {
                if s.value >= st.value {
                    descent_violations += 1;
                }
                history.push(IterationRecord {
                    iteration: iterations,
                    functional: s.value,
                    gradient: grad_norm,
                    step: t,
                    cg_iterations: cg_its,
                    det_min: s.det_min,
                });
                phi = trial;
                st = s;
            }
            None => {
                stalled = true;
                break;
            }
        }
    }
    if cfg.psd_probe_every == 0 || iterations % cfg.psd_probe_every != 0 {
        psd_probes.push(probe(&st, iterations));
    }

    let u = normalize_at(&u0.with_phi(obj.to_gridfn(&u0, phi)?)?)?;
    let report = assemble_report(
        &u,
        dp,
        cfg,
        ReportParts {
            grad_norm,
            stalled,
            iterations,
            descent_violations,
            psd_probes,
            defects,
            history,
            unknowns: obj.len(),
        },
    )?;
    Ok((u, report))
}

struct ReportParts {
    grad_norm: f64,
    stalled: bool,
    iterations: usize,
    descent_violations: usize,
    psd_probes: Vec<PsdProbe>,
    defects: Vec<f64>,
    history: Vec<IterationRecord>,
    unknowns: usize,
}

fn degenerate(u: &SPotential, floor: f64) -> Error {
    match u.hessian_field(floor) {
        Err(e) => e,
        Ok(_) => Error::DegenerateHessian {
            nodes: Vec::new(),
            floor,
        },
    }
}

fn assemble_report(u: &SPotential, dp: &DensityPair, cfg: &SolveConfig, p: ReportParts) -> Result<SolveReport> {
    let grid = u.grid();
    let margin = cfg.margin.unwrap_or_else(|| grid.default_margin());
    let opts = ResidualOptions {
        margin: Some(margin),
        det_floor: cfg.det_floor,
        dual_shape: None,
    };
    let primal = abreu_residual(u, dp, Form::Primal, &opts)?.sup;
    let cofactor = abreu_residual(u, dp, Form::Cofactor, &opts)?.sup;
    let dual = if cfg.dual_residual {
        abreu_residual(u, dp, Form::Dual, &opts).ok().map(|r| r.sup)
    } else {
        None
    };
    let sup_a = grid
        .active_nodes()
        .iter()
        .map(|&i| dp.a.eval(&grid.node(i)).abs())
        .fold(0.0, f64::max);
    let residual_tol = cfg.residual_tol.unwrap_or(1e-3 * (1.0 + sup_a));
    let l = functionals::l_functional(u, dp);
    let nd = u.dim() as f64 * interior_integral_fn(grid, |x| dp.d.eval(x));
    let identity_gap = (l - nd).abs();
    let hf = u.hessian_field(cfg.det_floor)?;
    let mask = grid.eroded_mask(margin);
    let (mut dmin, mut dmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, d) in hf.det.iter().enumerate() {
        if let (true, Some(d)) = (mask[i], d) {
            dmin = dmin.min(*d);
            dmax = dmax.max(*d);
        }
    }
    let mabuchi = functionals::mabuchi(u, dp, cfg.det_floor)?;
    let converged = !p.stalled
        && p.iterations < cfg.max_iterations
        && primal <= residual_tol
        && identity_gap <= cfg.identity_tol * nd.abs();
    let estimates = if converged {
        det_lower_report(u, dp, cfg.det_floor)
            .map(|(a, b)| vec![a, b])
            .unwrap_or_default()
    } else {
        Vec::new()
    };
    Ok(SolveReport {
        converged,
        stalled: p.stalled,
        iterations: p.iterations,
        mabuchi,
        gradient: p.grad_norm,
        residual: ResidualNorms { primal, cofactor, dual },
        residual_tol,
        l_functional: l,
        n_integral_d: nd,
        identity_gap,
        det_min: dmin,
        det_max: dmax,
        margin,
        descent_violations: p.descent_violations,
        psd_probes: p.psd_probes,
        affine_defect: p.defects,
        p_o: u.p_o().to_vec(),
        h: cfg.h,
        unknowns: p.unknowns,
        history: p.history,
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::guillemin::guillemin_trace;

    #[test]
    fn refuses_unbalanced() {
        let sq = Arc::new(Polytope::unit_square());
        let e = solve(&sq, &DensityPair::constant(1.0, 0.0), &SolveConfig::default()).unwrap_err();
        assert!(matches!(e, Error::RefusedAffineDefect { .. }));
        assert!(e.is_refusal());
    }

    #[test]
    fn interval_model() {
        let iv = Arc::new(Polytope::interval(0.0, 1.0));
        let cfg = SolveConfig {
            h: 1.0 / 128.0,
            ..Default::default()
        };
        let (u, rep) = solve(&iv, &DensityPair::constant(1.0, 2.0), &cfg).unwrap();
        assert!(rep.converged, "{rep:?}");
        let g = u.grid();
        let mut err: f64 = 0.0;
        for i in g.active_nodes() {
            let x = g.node(i);
            if x[0] >= 0.05 && x[0] <= 0.95 {
                let v = guillemin_trace(u.polytope(), &x) + 2f64.ln();
                err = err.max((u.node_value(i) - v).abs());
            }
        }
        assert!(err < 1e-2, "{err}");
        assert!(rep.psd_probes.iter().all(|p| p.min_ritz >= -1e-8 * p.max_ritz.abs()));
    }

    #[test]
    fn bad_step_control_rejected() {
        let cfg = SolveConfig {
            backtracking: 1.5,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::ConfigInvalid { .. })));
    }
}
