//! Measured constants for the determinant estimates, on closed-form and
//! solved potentials.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::discretize::{BoundaryQuadrature, Grid};
use crate::error::{Error, Result};
use crate::field::DensityPair;
use crate::legendre::{legendre_default, PotentialSampler};
use crate::linalg;
use crate::polytope::Polytope;
use crate::potentials::barrier::{barrier_eval, edge_lower_bound, fd_hessian_of, BarrierKind, BarrierSpec};
use crate::potentials::guillemin::{guillemin_det_product, guillemin_hessian};
use crate::potentials::{section, SPotential};
use crate::rng::StreamSplitter;

/// Relative change allowed between the two finest refinement levels.
pub const H_STABILITY: f64 = 0.10;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateReport {
    pub name: String,
    pub measured_constant: Option<f64>,
    pub region: String,
    /// (h, constant) pairs, coarse to fine.
    pub trend: Vec<(f64, f64)>,
    pub applicable: bool,
    pub pass: bool,
    pub threshold: String,
    pub extras: BTreeMap<String, Value>,
}

impl EstimateReport {
    fn new(name: &str, region: String, threshold: &str) -> Self {
        EstimateReport {
            name: name.into(),
            measured_constant: None,
            region,
            trend: Vec::new(),
            applicable: true,
            pass: false,
            threshold: threshold.into(),
            extras: BTreeMap::new(),
        }
    }

    /// Relative change between the last two trend entries.
    pub fn relative_change(&self) -> Option<f64> {
        let k = self.trend.len();
        (k >= 2).then(|| {
            let (a, b) = (self.trend[k - 2].1, self.trend[k - 1].1);
            (b - a).abs() / a.abs().max(b.abs()).max(1e-300)
        })
    }

    pub fn h_stable(&self) -> Option<bool> {
        self.relative_change().map(|r| r <= H_STABILITY)
    }
}

/// Combines reports of one estimate at several resolutions (any order) into
/// a single report at the finest one. pass also requires h-stability.
pub fn merge_refinement(mut reports: Vec<EstimateReport>) -> Option<EstimateReport> {
    reports.sort_by(|a, b| {
        let ha = a.trend.last().map_or(0.0, |t| t.0);
        let hb = b.trend.last().map_or(0.0, |t| t.0);
        hb.total_cmp(&ha)
    });
    let trend: Vec<(f64, f64)> = reports.iter().flat_map(|r| r.trend.clone()).collect();
    let mut out = reports.pop()?;
    let all_pass = out.pass && reports.iter().all(|r| r.pass);
    out.trend = trend;
    let stable = out.h_stable();
    out.pass = all_pass && stable.unwrap_or(true);
    out.extras
        .insert("relative_change".into(), json!(out.relative_change()));
    Some(out)
}

fn sup_a(u: &SPotential, dp: &DensityPair) -> f64 {
    let g = u.grid();
    let bq = BoundaryQuadrature::new(u.polytope(), g.h_max());
    g.active_nodes()
        .into_iter()
        .map(|i| g.node(i))
        .chain(bq.points)
        .map(|x| dp.a.eval(&x))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Probe points from the facet centroid along a_k / |a_k|^2, so delta_k
/// equals the probe parameter.
fn facet_probe(poly: &Polytope, k: usize, delta: f64) -> Vec<f64> {
    let verts = poly.facet_vertices(k);
    let n = poly.dim();
    let mut c = vec![0.0; n];
    for &v in &verts {
        for (a, b) in c.iter_mut().zip(&poly.vertices()[v]) {
            *a += b / verts.len() as f64;
        }
    }
    let a = &poly.facets()[k].normal;
    let a2 = linalg::dot(a, a);
    c.iter().zip(a).map(|(x, ai)| x + delta * ai / a2).collect()
}

/// Lower determinant bound: min det (sup A)^n on {delta >= margin}, and per
/// facet the slope of log det against log delta_k on [2h, 0.1] with
/// b = min det delta_k along the probe.
pub fn det_lower_report(u: &SPotential, dp: &DensityPair, det_floor: f64) -> Result<(EstimateReport, EstimateReport)> {
    det_lower_report_with(u, dp, det_floor, 0.05)
}

pub fn det_lower_report_with(
    u: &SPotential,
    dp: &DensityPair,
    det_floor: f64,
    margin: f64,
) -> Result<(EstimateReport, EstimateReport)> {
    let g = u.grid();
    let h = g.h_max();
    let n = u.dim();
    let hf = u.hessian_field(det_floor)?;
    let sa = sup_a(u, dp);

    let mut lower = EstimateReport::new("det_lower", format!("delta_k >= {margin}"), "constant > 0");
    lower.extras.insert("sup_a".into(), json!(sa));
    if sa > 0.0 {
        let mask = g.eroded_mask(margin);
        let m = (0..g.len())
            .filter(|&i| mask[i])
            .filter_map(|i| hf.det[i])
            .fold(f64::INFINITY, f64::min);
        let c = m * sa.powi(n as i32);
        lower.measured_constant = Some(c);
        lower.trend = vec![(h, c)];
        lower.pass = c.is_finite() && c > 0.0;
    } else {
        lower.applicable = false;
        lower
            .extras
            .insert("note".into(), json!("bound inapplicable: sup A <= 0"));
    }

    let poly = u.polytope();
    let lo = (2.0 * h).min(0.05);
    let hi = 0.1;
    let count = 12;
    let deltas: Vec<f64> = (0..count)
        .map(|j| (lo.ln() + (hi / lo).ln() * j as f64 / (count - 1) as f64).exp())
        .collect();
    let mut edge = EstimateReport::new(
        "det_edge",
        format!("facet collars delta_k in [{lo:.3e}, {hi}]"),
        "every slope <= 0",
    );
    let mut slopes = Vec::new();
    let mut bs = Vec::new();
    let mut probes = Vec::new();
    for k in 0..poly.facets().len() {
        let mut ld = Vec::new();
        let mut lx = Vec::new();
        let mut b = f64::INFINITY;
        for &d in &deltas {
            let x = facet_probe(poly, k, d);
            let Ok(hx) = u.hessian_at(&x) else { continue };
            let det = linalg::det(&hx, n);
            if det > 0.0 {
                lx.push(d.ln());
                ld.push(det.ln());
                b = b.min(det * d);
                probes.push((k, d, det));
            }
        }
        let (slope, icept) = if lx.len() >= 2 {
            linalg::linear_fit(&lx, &ld)
        } else {
            (f64::NAN, f64::NAN)
        };
        slopes.push(slope);
        bs.push(b);
        edge.extras
            .insert(format!("fit_{k}"), json!({"slope": slope, "intercept": icept}));
    }
    let trace: Vec<Value> = probes
        .iter()
        .map(|(k, d, det)| {
            let fit = &edge.extras[&format!("fit_{k}")];
            let fitted = (fit["intercept"].as_f64().unwrap_or(f64::NAN)
                + fit["slope"].as_f64().unwrap_or(f64::NAN) * d.ln())
            .exp();
            json!([k, d, det, fitted])
        })
        .collect();
    let bmin = bs.iter().cloned().fold(f64::INFINITY, f64::min);
    edge.measured_constant = Some(bmin);
    edge.trend = vec![(h, bmin)];
    edge.pass = slopes.iter().all(|s| s.is_finite() && *s <= 0.0);
    edge.extras.insert("slopes".into(), json!(slopes));
    edge.extras.insert("b".into(), json!(bs));
    edge.extras.insert("probes".into(), Value::Array(trace));
    Ok((lower, edge))
}

/// Edge-probe traces as CSV rows (facet, delta, det, fitted).
pub fn probe_csv(edge: &EstimateReport) -> String {
    let mut s = String::from("facet,delta,det,fitted\n");
    if let Some(Value::Array(rows)) = edge.extras.get("probes") {
        for r in rows {
            let v: Vec<String> = r.as_array().into_iter().flatten().map(|x| x.to_string()).collect();
            s.push_str(&v.join(","));
            s.push('\n');
        }
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpperConfig {
    pub d: f64,
    /// None: measured slope of log det against f, capped at 10.
    pub c3: Option<f64>,
    /// Sample-region margin for the Legendre transform.
    pub margin: f64,
    pub ceiling: f64,
}

impl Default for UpperConfig {
    fn default() -> Self {
        UpperConfig {
            d: 1.0,
            c3: None,
            margin: 0.05,
            ceiling: 1e12,
        }
    }
}

/// sup of exp(-C3 f) det(u_ij)(grad u^-1) / (d + f)^(2n) over the dual
/// sample, with f the transform of u recentred at p_o. Also reports
/// sup (1 + |x|^2) / (d + f)^2 and the max determinant on S_u(p_o, C/2).
pub fn det_upper_report(u: &SPotential, cfg: &UpperConfig, det_floor: f64) -> Result<EstimateReport> {
    if !(cfg.d > 0.0) {
        return Err(Error::OutOfRange(format!("d must be positive, got {}", cfg.d)));
    }
    let n = u.dim();
    let g = u.grid();
    let sampler = PotentialSampler::centered(u, cfg.margin);
    let dual = legendre_default(&sampler, g.shape().to_vec())?;
    let p_o = u.p_o();
    let pts: Vec<(Vec<f64>, f64, f64)> = (0..dual.grid().len())
        .into_par_iter()
        .filter(|&j| !dual.clipped[j])
        .filter_map(|j| {
            let xi: Vec<f64> = dual.gradient_map[j].iter().zip(p_o).map(|(a, b)| a + b).collect();
            let det = linalg::det(&u.hessian_at(&xi).ok()?, n);
            (det > det_floor).then(|| (dual.grid().node(j), dual.f.get(j), det))
        })
        .collect();
    if pts.is_empty() {
        return Err(Error::DualUnavailable("no unclipped dual samples".into()));
    }
    let measured_c3 = {
        let f: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let ld: Vec<f64> = pts.iter().map(|p| p.2.ln()).collect();
        linalg::linear_fit(&f, &ld).0
    };
    let c3 = cfg.c3.unwrap_or_else(|| measured_c3.clamp(0.0, 10.0));
    let mut sup_q: f64 = 0.0;
    let mut sup_b: f64 = 0.0;
    let mut arg = Vec::new();
    for (x, f, det) in &pts {
        let q = (-c3 * f).exp() * det / (cfg.d + f).powi(2 * n as i32);
        if q > sup_q {
            sup_q = q;
            arg = x.clone();
        }
        sup_b = sup_b.max((1.0 + linalg::dot(x, x)) / (cfg.d + f).powi(2));
    }
    // S_u(p_o, C/2) with C the smallest boundary trace
    let bq = BoundaryQuadrature::new(u.polytope(), g.h_max());
    let c = bq.points.iter().map(|x| u.trace_at(x)).fold(f64::INFINITY, f64::min);
    let sec = section(u, p_o, 0.5 * c);
    let hf = u.hessian_field_unchecked(det_floor);
    let sec_max = (0..g.len())
        .filter(|&i| sec.mask[i])
        .filter_map(|i| hf.det[i])
        .fold(0.0, f64::max);

    let mut r = EstimateReport::new(
        "det_upper",
        format!("unclipped dual nodes, sample margin {}", cfg.margin),
        &format!("constant <= {:e}", cfg.ceiling),
    );
    r.measured_constant = Some(sup_q);
    r.trend = vec![(g.h_max(), sup_q)];
    r.pass = sup_q.is_finite() && sup_q <= cfg.ceiling;
    r.extras.insert("c3".into(), json!(c3));
    r.extras.insert("c3_measured".into(), json!(measured_c3));
    r.extras.insert("d".into(), json!(cfg.d));
    r.extras.insert("hypothesis_b".into(), json!(sup_b));
    r.extras.insert("argsup".into(), json!(arg));
    r.extras.insert("samples".into(), json!(pts.len()));
    r.extras.insert("section_level".into(), json!(0.5 * c));
    r.extras.insert("section_compact".into(), json!(sec.is_compact));
    r.extras.insert("section_max_det".into(), json!(sec_max));
    Ok(r)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarrierCheckConfig {
    pub samples: usize,
    pub seed: u64,
    pub h: f64,
    pub tol: f64,
}

impl Default for BarrierCheckConfig {
    fn default() -> Self {
        BarrierCheckConfig {
            samples: 200,
            seed: 0,
            h: 1e-3,
            tol: 1e-4,
        }
    }
}

/// Closed-form Hessian and determinant against central differences of the
/// value, the A - B lower bound (edge kind, n >= 2), the measured C_1 in
/// det > C_1 xi_1^(n alpha - 2), and v_12 = 0 on the xi' = 0 slice.
pub fn barrier_hessian_check(b: &BarrierSpec, cfg: &BarrierCheckConfig) -> Result<EstimateReport> {
    if cfg.samples == 0 || !(cfg.h > 0.0) {
        return Err(Error::OutOfRange("barrier check needs samples > 0 and h > 0".into()));
    }
    let n = b.dim;
    let r = b.c / b.m();
    let lo1 = 0.1 * r;
    if lo1 <= 2.0 * cfg.h {
        return Err(Error::OutOfRange(format!(
            "admissible slab xi_1 <= {r:e} too thin for FD step {}",
            cfg.h
        )));
    }
    let streams = StreamSplitter::new(cfg.seed);
    let pts: Vec<Vec<f64>> = (0..cfg.samples)
        .map(|i| {
            let mut rng = streams.indexed("barrier", &[i as u64]);
            loop {
                let mut x = vec![rng.random_range(lo1..=r)];
                for _ in 1..n {
                    x.push(rng.random_range(-r.sqrt()..=r.sqrt()));
                }
                // keep FD stencils inside the admissible set
                if b.admissible(&x) && x[0] + cfg.h <= r && {
                    let s: f64 = x[1..].iter().map(|v| (v.abs() + cfg.h).powi(2)).sum();
                    s <= r
                } {
                    return x;
                }
            }
        })
        .collect();
    let rows: Vec<Result<(f64, f64, bool, f64, bool)>> = pts
        .par_iter()
        .map(|x| {
            let e = barrier_eval(b, x)?;
            let fd = fd_hessian_of(b, x, cfg.h)?;
            let scale = linalg::max_abs(&e.hessian);
            let ent = e
                .hessian
                .iter()
                .zip(&fd)
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max)
                / scale;
            let det_fd = linalg::det(&fd, n);
            let det_rel = (det_fd - e.det).abs() / e.det.abs();
            let bound_ok = match b.kind {
                BarrierKind::EdgeBarrier if n >= 2 => e.a_minus_b >= edge_lower_bound(b, x)?,
                _ => true,
            };
            let c1 = e.det / x[0].powf(n as f64 * b.alpha - 2.0);
            let mut slice = x.clone();
            slice[1..].iter_mut().for_each(|v| *v = 0.0);
            let zero12 = n < 2 || barrier_eval(b, &slice)?.v12 == 0.0;
            Ok((ent, det_rel, bound_ok, c1, zero12))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let ent = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let det_rel = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let bound_ok = rows.iter().all(|r| r.2);
    let c1 = rows.iter().map(|r| r.3).fold(f64::INFINITY, f64::min);
    let zero12 = rows.iter().all(|r| r.4);
    let kind = match b.kind {
        BarrierKind::EdgeBarrier => "edge",
        BarrierKind::LinearCapBarrier => "linear_cap",
    };
    let mut rep = EstimateReport::new(
        &format!("barrier_{kind}"),
        format!("xi_1 in [{lo1:.4}, {r:.4}], |xi'|^2 <= {r:.4}"),
        &format!("max relative discrepancy <= {:e}", cfg.tol),
    );
    rep.measured_constant = Some(ent.max(det_rel));
    rep.trend = vec![(cfg.h, ent.max(det_rel))];
    rep.pass = ent <= cfg.tol && det_rel <= cfg.tol && bound_ok && zero12 && c1 > 0.0;
    rep.extras.insert("entry_discrepancy".into(), json!(ent));
    rep.extras.insert("det_discrepancy".into(), json!(det_rel));
    rep.extras.insert("lower_bound_holds".into(), json!(bound_ok));
    rep.extras.insert("c1".into(), json!(c1));
    rep.extras.insert("v12_zero_on_slice".into(), json!(zero12));
    rep.extras.insert("samples".into(), json!(cfg.samples));
    rep.extras.insert("seed".into(), json!(cfg.seed));
    Ok(rep)
}

/// sup det(v_ij) d_E(xi, boundary)^n over grid nodes at each spacing in
/// `hs`, gated by det(v_ij) prod delta_k = 1 on boxes.
pub fn guillemin_distance_bound(poly: &Arc<Polytope>, hs: &[f64]) -> Result<EstimateReport> {
    let n = poly.dim();
    let mut rep = EstimateReport::new(
        "guillemin_distance",
        "all active grid nodes".into(),
        "h-stable within 10%",
    );
    let mut gate: f64 = 0.0;
    for &h in hs {
        let g = Grid::new(poly.clone(), h)?;
        let vals: Vec<(f64, f64)> = g
            .active_nodes()
            .par_iter()
            .filter_map(|&i| {
                let x = g.node(i);
                let det = linalg::det(&guillemin_hessian(poly, &x).ok()?, n);
                let d = poly.euclidean_boundary_distance(&x).ok()?;
                let prod = guillemin_det_product(poly, &x).ok()?;
                Some((det * d.powi(n as i32), (prod - 1.0).abs()))
            })
            .collect();
        let sup = vals.iter().map(|v| v.0).fold(0.0, f64::max);
        gate = vals.iter().map(|v| v.1).fold(gate, f64::max);
        rep.trend.push((h, sup));
    }
    rep.trend.sort_by(|a, b| b.0.total_cmp(&a.0));
    let c = rep.trend.last().map(|t| t.1);
    rep.measured_constant = c;
    let gate_ok = !poly.is_box_aligned() || gate <= 1e-10;
    rep.pass = gate_ok && c.is_some_and(|c| c.is_finite()) && rep.h_stable().unwrap_or(true);
    rep.extras.insert("det_product_gap".into(), json!(gate));
    rep.extras
        .insert("relative_change".into(), json!(rep.relative_change()));
    Ok(rep)
}
