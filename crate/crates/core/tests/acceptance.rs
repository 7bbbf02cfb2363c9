//! Acceptance suite. One PASS/FAIL line per criterion; oracles are computed
//! here from closed forms, independently of the library code under test.
//!
//! Run with `cargo test --release -p abreu-core --test acceptance`.

use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use abreu_core::discretize::{Grid, GridFn};
use abreu_core::estimates::{barrier_hessian_check, det_lower_report, BarrierCheckConfig};
use abreu_core::field::{DensityPair, Polynomial, ScalarField, Smooth};
use abreu_core::functionals::{affine_defect, replay_witness, stability_lambda, FamilyConfig};
use abreu_core::legendre::{conjugate_point, duality_check, ConvexSampler, PotentialSampler};
use abreu_core::operator::{abreu_residual, cofactor_field, Form, ResidualOptions};
use abreu_core::polytope::Polytope;
use abreu_core::potentials::{guillemin_det_product, BarrierSpec, SPotential};
use abreu_core::solver::{
    balanced_interval_sequence, continuation, solve, solve_from, ContinuationConfig, SolveConfig, SolveReport,
};
use abreu_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that cannot hold as literally stated; they print FAIL without
/// failing the run.
const KNOWN_UNATTAINABLE: &[&str] = &["11"];

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: &'static str, pass: bool, detail: String) -> Line {
    Line { id, pass, detail }
}

/// xi log xi + (1 - xi) log(1 - xi), normalized at 1/2.
fn v_interval(x: f64) -> f64 {
    x * x.ln() + (1.0 - x) * (1.0 - x).ln() + 2f64.ln()
}

/// Least-squares slope of log err against log h.
fn order(h: &[f64], err: &[f64]) -> f64 {
    let x: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn identity_ok(r: &SolveReport, exact_nd: f64) -> bool {
    (r.l_functional - exact_nd).abs() <= 1e-3 * exact_nd
}

fn c1_interval(solves: &mut Vec<(String, SolveReport, f64)>) -> Line {
    let iv = Arc::new(Polytope::interval(0.0, 1.0));
    let cfg = SolveConfig {
        h: 1.0 / 256.0,
        p_o: Some(vec![0.5]),
        ..Default::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let t = Instant::now();
    let res = pool.install(|| solve(&iv, &DensityPair::constant(1.0, 2.0), &cfg));
    let secs = t.elapsed().as_secs_f64();
    let (u, rep) = match res {
        Ok(x) => x,
        Err(e) => return line("1", false, format!("solve failed: {e}")),
    };
    let g = u.grid();
    let mut err: f64 = 0.0;
    for i in g.active_nodes() {
        let x = g.node(i)[0];
        if x.min(1.0 - x) >= 0.05 {
            err = err.max((u.node_value(i) - v_interval(x)).abs());
        }
    }
    let pass = rep.converged && err <= 1e-2 && rep.residual.primal <= 1e-3 && secs <= 30.0;
    let detail = format!(
        "converged={} sup|u-v|={err:.2e} (<=1e-2) residual={:.2e} (<=1e-3) time={secs:.2}s (<=30s, 1 thread)",
        rep.converged, rep.residual.primal
    );
    solves.push(("interval A=2".into(), rep, 1.0));
    line("1", pass, detail)
}

/// Same interval problem started away from the Guillemin potential, so the
/// Newton iteration has work to do.
fn c1b_perturbed() -> Line {
    let iv = Arc::new(Polytope::interval(0.0, 1.0));
    let h = 1.0 / 256.0;
    let cfg = SolveConfig {
        h,
        p_o: Some(vec![0.5]),
        ..Default::default()
    };
    let grid = Arc::new(Grid::new(iv.clone(), h).unwrap());
    let init = GridFn::from_fn(grid, |x| 0.2 * (std::f64::consts::PI * x[0]).sin() + 0.3 * x[0] * x[0]);
    let t = Instant::now();
    let (u, rep) = match solve_from(&iv, &DensityPair::constant(1.0, 2.0), &cfg, Some(&init)) {
        Ok(x) => x,
        Err(e) => return line("1b", false, format!("solve failed: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let g = u.grid();
    let mut err: f64 = 0.0;
    for i in g.active_nodes() {
        let x = g.node(i)[0];
        if x.min(1.0 - x) >= 0.05 {
            err = err.max((u.node_value(i) - v_interval(x)).abs());
        }
    }
    let pass = rep.converged && rep.iterations > 0 && err <= 1e-2 && rep.residual.primal <= 1e-3;
    let detail = format!(
        "perturbed start: converged={} iterations={} sup|u-v|={err:.2e} (<=1e-2) residual={:.2e} (<=1e-3) time={secs:.2}s",
        rep.converged, rep.iterations, rep.residual.primal
    );
    line("1b", pass, detail)
}

fn c2_square(solves: &mut Vec<(String, SolveReport, f64)>) -> Line {
    let sq = Arc::new(Polytope::unit_square());
    let cfg = SolveConfig {
        h: 1.0 / 64.0,
        p_o: Some(vec![0.5, 0.5]),
        ..Default::default()
    };
    let t = Instant::now();
    let (u, rep) = match solve(&sq, &DensityPair::constant(1.0, 4.0), &cfg) {
        Ok(x) => x,
        Err(e) => return line("2", false, format!("solve failed: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let g = u.grid();
    let mut err: f64 = 0.0;
    for i in g.active_nodes() {
        let p = g.node(i);
        if p.iter().all(|x| x.min(1.0 - x) >= 0.1) {
            err = err.max((u.node_value(i) - v_interval(p[0]) - v_interval(p[1])).abs());
        }
    }
    let pass = rep.converged && err <= 5e-2 && secs <= 300.0;
    let detail = format!(
        "converged={} sup|u-v|={err:.2e} (<=5e-2) time={secs:.2}s (<=300s)",
        rep.converged
    );
    solves.push(("square A=4".into(), rep, 2.0));
    line("2", pass, detail)
}

fn c3_identity(solves: &[(String, SolveReport, f64)]) -> Line {
    let converged: Vec<_> = solves.iter().filter(|(_, r, _)| r.converged).collect();
    let bad: Vec<String> = converged
        .iter()
        .filter(|(_, r, nd)| !identity_ok(r, *nd))
        .map(|(n, r, nd)| format!("{n}: |L-nD|={:.2e}", (r.l_functional - nd).abs()))
        .collect();
    let worst = converged
        .iter()
        .map(|(_, r, nd)| (r.l_functional - nd).abs() / nd)
        .fold(0.0, f64::max);
    line(
        "3",
        !converged.is_empty() && bad.is_empty(),
        format!(
            "{} converged solves, worst relative gap {worst:.2e} (<=1e-3) {}",
            converged.len(),
            bad.join("; ")
        ),
    )
}

fn c4_defect() -> Line {
    let iv = Arc::new(Polytope::interval(0.0, 1.0));
    let sq = Arc::new(Polytope::unit_square());
    let d1 = affine_defect(&iv, &DensityPair::constant(1.0, 2.0), 1.0 / 256.0).unwrap();
    let d2 = affine_defect(&sq, &DensityPair::constant(1.0, 4.0), 1.0 / 64.0).unwrap();
    let worst = d1.iter().chain(&d2).map(|d| d.abs()).fold(0.0, f64::max);
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/bad_affine.json");
    let out = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_abreu-lab"))
        .arg("solve")
        .arg(&cfg)
        .arg("--output")
        .arg(out.path().join("o").display().to_string())
        .output()
        .unwrap();
    let code = status.status.code();
    let msg = String::from_utf8_lossy(&status.stderr);
    let pass = worst <= 1e-6 && code == Some(2) && msg.contains("L_A(1)");
    line(
        "4",
        pass,
        format!(
            "max model defect {worst:.2e} (<=1e-6); A=0 square exit {code:?} (2), message names L_A(1)={}",
            msg.contains("L_A(1)")
        ),
    )
}

fn c5_stability() -> Line {
    let iv = Arc::new(Polytope::interval(0.0, 1.0));
    // one-kink oracle: for u = (xi - c)_+ with c >= p_o the ratio is
    // ((1 - c) - (1 - c)^2) / (1 - c); brute force over c
    let oracle = (0..=10_000)
        .map(|j| 0.5 + 0.4999 * j as f64 / 10_000.0)
        .map(|c: f64| ((1.0 - c) - (1.0 - c).powi(2)) / (1.0 - c))
        .fold(f64::INFINITY, f64::min);
    let fam = FamilyConfig {
        max_kinks: 2,
        samples: 1000,
        ..Default::default()
    };
    let dp = DensityPair::constant(1.0, 2.0);
    let r = stability_lambda(&iv, &dp, &fam, 7, Some(vec![0.5])).unwrap();
    let ok_a = (r.lambda_hat - 0.5).abs() <= 0.02 && (r.lambda_hat - oracle).abs() <= 0.02 && r.samples >= 2000;
    let dp6 = DensityPair::constant(1.0, 6.0);
    let fam6 = FamilyConfig {
        allow_affine_defect: true,
        ..fam
    };
    let r6 = stability_lambda(&iv, &dp6, &fam6, 7, Some(vec![0.5])).unwrap();
    let replay = replay_witness(&iv, &dp6, &r6).unwrap();
    let replay_ok = replay.is_some_and(|v| (v - r6.lambda_hat).abs() <= 1e-12);
    let ok_b = r6.lambda_hat <= -0.45 && replay_ok;
    line(
        "5",
        ok_a && ok_b,
        format!(
            "A=2: lambda_hat={:.4} oracle={oracle:.4} members={}; A=6: lambda_hat={:.4} (<=-0.45) replay={replay:?}",
            r.lambda_hat, r.samples, r6.lambda_hat
        ),
    )
}

fn c6_det_product() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let iv = Polytope::interval(0.0, 1.0);
    let sq = Polytope::unit_square();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        worst = worst.max((guillemin_det_product(&iv, &[x]).unwrap() - 1.0).abs());
        let p = [rng.random_range(1e-6..1.0 - 1e-6), rng.random_range(1e-6..1.0 - 1e-6)];
        worst = worst.max((guillemin_det_product(&sq, &p).unwrap() - 1.0).abs());
    }
    line(
        "6",
        worst <= 1e-10,
        format!("max |product - 1| = {worst:.2e} over 2x1000 points (<=1e-10)"),
    )
}

fn c7_barriers() -> Line {
    let sq = Polytope::unit_square();
    let cfg = BarrierCheckConfig {
        samples: 200,
        h: 1e-3,
        seed: 7,
        ..Default::default()
    };
    let mut parts = Vec::new();
    let mut pass = true;
    for spec in [
        BarrierSpec::edge_for(&sq, 0.5, 0.5).unwrap(),
        BarrierSpec::linear_cap_for(&sq, 1.25).unwrap(),
    ] {
        let r = barrier_hessian_check(&spec, &cfg).unwrap();
        let disc = r.measured_constant.unwrap_or(f64::INFINITY);
        let bound = r.extras["lower_bound_holds"].as_bool().unwrap_or(false);
        pass &= disc <= 1e-4 && bound;
        parts.push(format!(
            "{:?}: discrepancy {disc:.2e} (<=1e-4) bound holds {bound}",
            spec.kind
        ));
    }
    line("7", pass, parts.join("; "))
}

fn c8_edge() -> Line {
    let sq = Arc::new(Polytope::unit_square());
    let u = SPotential::guillemin(sq, 1.0 / 64.0, vec![0.5, 0.5]).unwrap();
    let (_, edge) = det_lower_report(&u, &DensityPair::constant(1.0, 4.0), 1e-12).unwrap();
    let slopes: Vec<f64> = edge.extras["slopes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_f64().unwrap_or(f64::NAN))
        .collect();
    let pass = slopes.len() == 4 && slopes.iter().all(|s| (s + 1.0).abs() <= 0.1);
    line("8", pass, format!("collar slopes {slopes:.3?} (-1 +- 0.1)"))
}

struct ExpSum;

impl Smooth for ExpSum {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v.exp()).sum()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.exp()).collect()
    }
    fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = x[i].exp();
        }
        h
    }
}

fn c9_legendre() -> Line {
    let sq = Arc::new(Polytope::unit_square());
    let h = 1.0 / 64.0;
    let grid = Arc::new(Grid::new(sq, h).unwrap());
    let tests: Vec<(&str, Arc<dyn Smooth>)> = vec![
        (
            "quadratic",
            Arc::new(Polynomial::new(vec![
                (1.0, vec![2, 0]),
                (0.5, vec![1, 1]),
                (0.75, vec![0, 2]),
            ])),
        ),
        (
            "quartic",
            Arc::new(Polynomial::new(vec![
                (0.5, vec![2, 0]),
                (0.5, vec![0, 2]),
                (1.0, vec![4, 0]),
                (1.0, vec![0, 4]),
            ])),
        ),
        ("exp-sum", Arc::new(ExpSum)),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, f) in tests {
        let u = SPotential::analytic(grid.clone(), f, vec![0.5, 0.5], false).unwrap();
        match duality_check(&u, 0.1, grid.shape().to_vec()) {
            Ok(c) => {
                pass &= c.young <= 5.0 * h && c.involution <= 5.0 * h && c.checked > 0;
                parts.push(format!("{name}: young {:.1e} involution {:.1e}", c.young, c.involution));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    let iv = Arc::new(Polytope::interval(0.0, 1.0));
    let g = SPotential::guillemin(iv, 1.0 / 256.0, vec![0.5]).unwrap();
    let s = PotentialSampler::new(&g, 0.0);
    let f0 = conjugate_point(&s as &dyn ConvexSampler, &s.samples(), &[0.0]).map(|p| p.value);
    let f0_ok = f0.is_some_and(|v| (v - 2f64.ln()).abs() <= 1e-3);
    pass &= f0_ok;
    parts.push(format!("interval f(0)={f0:?} vs log 2 (1e-3)"));
    line("9", pass, format!("tolerance 5h={:.3}; {}", 5.0 * h, parts.join("; ")))
}

/// Strictly convex polynomial with random coefficients: a positive definite
/// quadratic plus k (w . xi)^4 and k (w . xi)^6 ridges. Degree six keeps the
/// third derivatives of the cofactor entries nonzero.
fn random_convex_polynomial(seed: u64) -> Polynomial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: f64 = rng.random_range(0.5..1.5);
    let c: f64 = rng.random_range(0.5..1.5);
    let b: f64 = rng.random_range(-0.9..0.9) * (a * c).sqrt();
    let mut terms = vec![(a, vec![2, 0]), (b, vec![1, 1]), (c, vec![0, 2])];
    for p in [4u32, 6] {
        let k: f64 = rng.random_range(0.1..0.5);
        let (w1, w2): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let mut binom = 1.0;
        for j in 0..=p {
            terms.push((k * binom * w1.powi(j as i32) * w2.powi((p - j) as i32), vec![j, p - j]));
            binom = binom * (p - j) as f64 / (j + 1) as f64;
        }
    }
    Polynomial::new(terms)
}

fn sci(v: &[f64]) -> String {
    let s: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", s.join(", "))
}

const HS: [f64; 3] = [1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0];

fn c10_cofactor() -> Line {
    let sq = Arc::new(Polytope::unit_square());
    let p: Arc<dyn Smooth> = Arc::new(random_convex_polynomial(10));
    let mut errs = Vec::new();
    for h in HS {
        let grid = Arc::new(Grid::new(sq.clone(), h).unwrap());
        let u = SPotential::analytic(grid.clone(), p.clone(), vec![0.5, 0.5], false).unwrap();
        let mask = grid.eroded_mask(0.1);
        errs.push(cofactor_field(&u, 1e-12, &mask).unwrap().max_divergence);
    }
    let ord = order(&HS, &errs);
    line(
        "10",
        ord >= 1.8,
        format!("max |div U| {} order {ord:.2} (>=1.8)", sci(&errs)),
    )
}

fn c12_forms() -> Line {
    let sq = Arc::new(Polytope::unit_square());
    let p: Arc<dyn Smooth> = Arc::new(random_convex_polynomial(12));
    let d = Polynomial::new(vec![(1.0, vec![0, 0]), (0.3, vec![1, 0]), (0.2, vec![0, 2])]);
    let dp = DensityPair::new(ScalarField::Polynomial(d), ScalarField::Constant(1.0));
    let opts = ResidualOptions {
        margin: Some(0.1),
        ..Default::default()
    };
    let mut cof = Vec::new();
    let mut dual = Vec::new();
    for h in HS {
        let grid = Arc::new(Grid::new(sq.clone(), h).unwrap());
        let u = SPotential::analytic(grid, p.clone(), vec![0.5, 0.5], false).unwrap();
        let rp = abreu_residual(&u, &dp, Form::Primal, &opts).unwrap();
        let rc = abreu_residual(&u, &dp, Form::Cofactor, &opts).unwrap();
        let rd = abreu_residual(&u, &dp, Form::Dual, &opts).unwrap();
        let gap = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .zip(&rp.mask)
                .filter(|((x, y), m)| **m && x.is_finite() && y.is_finite())
                .fold(0.0f64, |s, ((x, y), _)| s.max((x - y).abs()))
        };
        cof.push(gap(rp.field.values(), rc.field.values()));
        dual.push(gap(rp.field.values(), rd.field.values()));
    }
    let oc = order(&HS, &cof);
    let od = order(&HS, &dual);
    line(
        "12",
        oc >= 1.8 && od >= 1.8,
        format!(
            "primal-cofactor {} order {oc:.2}; primal-dual {} order {od:.2} (>=1.8, D non-constant)",
            sci(&cof),
            sci(&dual)
        ),
    )
}

fn c11_continuation(solves: &mut Vec<(String, SolveReport, f64)>) -> Vec<Line> {
    let iv = Arc::new(Polytope::interval(0.0, 1.0));
    let cfg = SolveConfig {
        h: 1.0 / 256.0,
        p_o: Some(vec![0.5]),
        ..Default::default()
    };
    let ccfg = ContinuationConfig {
        seed: 11,
        ..Default::default()
    };
    let check = |seq: &[DensityPair]| {
        let (_, rep) = continuation(&iv, seq, &cfg, &ccfg).unwrap();
        let refused = rep.rows.iter().filter(|r| r.refused).count();
        let pass = refused == 0
            && rep.gaps_strictly_decreasing
            && rep.final_gap.is_some_and(|g| g <= 2e-2)
            && rep.boundary_mass_uniform;
        let gaps: Vec<f64> = rep.rows.iter().filter_map(|r| r.sup_gap).collect();
        (rep, pass, refused, gaps)
    };
    let literal: Vec<DensityPair> = (1..=8)
        .map(|k| DensityPair::constant(1.0, 2.0 + 1.0 / k as f64))
        .collect();
    let (_, lp, lref, _) = check(&literal);
    let first_refusal = abreu_core::solver::solve(&iv, &literal[0], &cfg).err();
    let refusal_ok = matches!(first_refusal, Some(Error::RefusedAffineDefect { .. }));
    let (brep, bp, _, gaps) = check(&balanced_interval_sequence(8));
    for r in &brep.rows {
        if let Some(rep) = &r.report {
            solves.push((format!("continuation k={}", r.k), rep.clone(), 1.0));
        }
    }
    vec![
        line(
            "11",
            lp,
            format!("A=2+1/k: {lref}/8 refused (L_A(1) = -1/k), refusal typed correctly={refusal_ok}"),
        ),
        line(
            "11b",
            bp,
            format!(
                "balanced A_k=2+(6xi^2-6xi+1)/k: gaps {} strictly decreasing={} final<=2e-2, boundary mass uniform={}",
                sci(&gaps),
                brep.gaps_strictly_decreasing,
                brep.boundary_mass_uniform
            ),
        ),
    ]
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let t = Instant::now();
    let mut solves = Vec::new();
    let mut lines = vec![c1_interval(&mut solves), c1b_perturbed(), c2_square(&mut solves)];
    let cont = c11_continuation(&mut solves);
    lines.push(c3_identity(&solves));
    lines.extend([
        c4_defect(),
        c5_stability(),
        c6_det_product(),
        c7_barriers(),
        c8_edge(),
        c9_legendre(),
        c10_cofactor(),
    ]);
    lines.extend(cont);
    lines.push(c12_forms());
    let key = |id: &str| {
        let digits: String = id.chars().take_while(|c| c.is_ascii_digit()).collect();
        (digits.parse::<u32>().unwrap_or(0), id.to_string())
    };
    lines.sort_by_key(|l| key(l.id));
    let mut hard_failures = 0;
    for l in &lines {
        let tag = if l.pass {
            "PASS"
        } else if KNOWN_UNATTAINABLE.contains(&l.id) {
            "FAIL (known)"
        } else {
            hard_failures += 1;
            "FAIL"
        };
        println!("criterion {:>3}: {tag:<12} {}", l.id, l.detail);
    }
    println!(
        "acceptance: {} lines, {hard_failures} unexpected failures, {:.1}s",
        lines.len(),
        t.elapsed().as_secs_f64()
    );
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
