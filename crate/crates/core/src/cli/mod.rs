//! Configuration-driven front end: `abreu-lab <subcommand> <config> [--key value]...`.
//!
//! Reports are deterministic JSON; wall-clock data goes to a separate
//! `<subcommand>.metadata.json` next to them.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::discretize::io::{read_dump, write_csv, write_dump};
use crate::error::{Error, Result};
use crate::estimates::{
    barrier_hessian_check, det_lower_report, det_upper_report, guillemin_distance_bound, probe_csv,
};
use crate::functionals::{replay_witness, stability_lambda};
use crate::legendre::{conjugate_point, duality_check, legendre_default, ConvexSampler, PotentialSampler};
use crate::potentials::{alpha_schedule, normalize_at, BarrierSpec, SPotential};
use crate::solver::{continuation, solve, ContinuationConfig};

pub use config::{flag_value, load, Resolved, RunConfig, SCHEMA};

pub const THREADS_ENV: &str = "ABREU_LAB_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Subcommand {
    Solve,
    Stability,
    Validate,
    Barrier,
    Legendre,
    Continuation,
    Report,
}

impl Subcommand {
    pub const ALL: [Subcommand; 7] = [
        Subcommand::Solve,
        Subcommand::Stability,
        Subcommand::Validate,
        Subcommand::Barrier,
        Subcommand::Legendre,
        Subcommand::Continuation,
        Subcommand::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Solve => "solve",
            Subcommand::Stability => "stability",
            Subcommand::Validate => "validate",
            Subcommand::Barrier => "barrier",
            Subcommand::Legendre => "legendre",
            Subcommand::Continuation => "continuation",
            Subcommand::Report => "report",
        }
    }
}

/// Result of a subcommand that ran to completion. `code` is 0, or 2 when
/// the run finished but the data were refused somewhere (continuation
/// rows), or 1 when a solve did not converge.
#[derive(Debug)]
pub struct Outcome {
    pub code: i32,
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

pub fn exit_code(r: &Result<Outcome>) -> i32 {
    match r {
        Ok(o) => o.code,
        Err(e) if e.is_refusal() => 2,
        Err(_) => 1,
    }
}

/// Worker cap from ABREU_LAB_THREADS; None when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::config(
                THREADS_ENV,
                format!("expected a positive integer, got {s:?}"),
            )),
        },
    }
}

/// Turns `--key value` / `--key=value` pairs into overrides.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(Error::config(a, "expected --key value"));
        };
        let (k, v) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::config(key, "missing value"))?;
                (key.to_string(), v.clone())
            }
        };
        if k.is_empty() {
            return Err(Error::config(a, "empty key"));
        }
        out.push((k, flag_value(&v)));
    }
    Ok(out)
}

/// Loads the config, runs the subcommand on a pool capped by
/// ABREU_LAB_THREADS and writes reports plus metadata.
pub fn run(sub: Subcommand, config_path: &Path, overrides: &[(String, Value)]) -> Result<Outcome> {
    let threads = threads_from_env()?;
    let rc = load(config_path, sub, overrides)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let workers = pool.current_num_threads();
    pool.install(|| run_resolved(sub, &rc, config_path, overrides, workers))
}

pub fn run_resolved(
    sub: Subcommand,
    rc: &Resolved,
    config_path: &Path,
    overrides: &[(String, Value)],
    workers: usize,
) -> Result<Outcome> {
    let out = rc.config.output.clone();
    fs::create_dir_all(&out)?;
    let _lock = OutputLock::acquire(&out)?;
    let started = unix_ms();
    let clock = Instant::now();
    let mut outcome = match sub {
        Subcommand::Solve => run_solve(rc, &out),
        Subcommand::Stability => run_stability(rc, &out),
        Subcommand::Validate => run_validate(rc, &out),
        Subcommand::Barrier => run_barrier(rc, &out),
        Subcommand::Legendre => run_legendre(rc, &out),
        Subcommand::Continuation => run_continuation(rc, &out),
        Subcommand::Report => run_report(rc, &out),
    }?;
    let meta_path = out.join(format!("{}.metadata.json", sub.name()));
    let meta = json!({
        "subcommand": sub.name(),
        "config": config_path.display().to_string(),
        "overrides": overrides.iter().map(|(k, v)| json!([k, v])).collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "threads": workers,
        "started_unix_ms": started,
        "finished_unix_ms": unix_ms(),
        "elapsed_s": clock.elapsed().as_secs_f64(),
        "artifacts": outcome.artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "exit_code": outcome.code,
    });
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    outcome.artifacts.push(meta_path);
    Ok(outcome)
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Refuses a second concurrent run on one output directory.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let p = dir.join(".abreu-lab.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&p) {
            Ok(_) => Ok(OutputLock(p)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Io(std::io::Error::other(format!(
                "output directory {} is in use (remove {} if no run is active)",
                dir.display(),
                p.display()
            )))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_json<T: Serialize>(path: PathBuf, v: &T, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(&path, s)?;
    artifacts.push(path);
    Ok(())
}

fn p_o(rc: &Resolved) -> Vec<f64> {
    rc.solver.p_o.clone().unwrap_or_else(|| rc.polytope.vertex_centroid())
}

/// The potential named by `path` (a phi dump) or the normalized Guillemin
/// potential on the configured grid.
fn potential(rc: &Resolved, path: Option<&PathBuf>, normalized: bool) -> Result<(SPotential, String)> {
    match path {
        Some(p) => {
            let p = rc.input(p);
            let phi = read_dump(&p, Some(rc.polytope.clone()))?;
            Ok((SPotential::new(phi, p_o(rc))?, p.display().to_string()))
        }
        None => {
            let g = SPotential::guillemin(rc.polytope.clone(), rc.solver.h, p_o(rc))?;
            let g = if normalized { normalize_at(&g)? } else { g };
            Ok((g, "guillemin".into()))
        }
    }
}

fn run_solve(rc: &Resolved, out: &Path) -> Result<Outcome> {
    let (u, report) = solve(&rc.polytope, &rc.density, &rc.solver)?;
    let mut artifacts = Vec::new();
    write_json(out.join("solve_report.json"), &report, &mut artifacts)?;
    let phi = out.join("phi.bin");
    write_dump(&phi, u.phi())?;
    artifacts.push(phi);
    artifacts.push(out.join("phi.json"));
    let ucsv = out.join("u.csv");
    write_csv(&ucsv, &u.values())?;
    artifacts.push(ucsv);
    let summary = format!(
        "solve: converged={} iterations={} residual={:.3e} (tol {:.3e}) identity_gap={:.3e} mabuchi={:.10}",
        report.converged,
        report.iterations,
        report.residual.primal,
        report.residual_tol,
        report.identity_gap,
        report.mabuchi
    );
    Ok(Outcome {
        code: if report.converged { 0 } else { 1 },
        summary,
        artifacts,
    })
}

fn run_stability(rc: &Resolved, out: &Path) -> Result<Outcome> {
    let seed = rc.seed("stability")?;
    let report = stability_lambda(&rc.polytope, &rc.density, &rc.family(), seed, rc.config.p_o.clone())?;
    let replay = replay_witness(&rc.polytope, &rc.density, &report)?;
    let mut artifacts = Vec::new();
    write_json(
        out.join("stability_report.json"),
        &json!({ "report": report, "witness_replay": replay }),
        &mut artifacts,
    )?;
    let summary = format!(
        "stability: lambda_hat={:.6} ({}) over {} members, witness {:?}",
        report.lambda_hat, report.label, report.evaluated, report.witness_member
    );
    Ok(Outcome {
        code: 0,
        summary,
        artifacts,
    })
}

fn run_validate(rc: &Resolved, out: &Path) -> Result<Outcome> {
    let (u, source) = potential(rc, rc.config.validate.potential.as_ref(), true)?;
    let floor = rc.solver.det_floor;
    let (lower, edge) = det_lower_report(&u, &rc.density, floor)?;
    let upper = det_upper_report(&u, &rc.config.validate.upper, floor)?;
    let h = rc.solver.h;
    let distance = guillemin_distance_bound(&rc.polytope, &[h, 0.5 * h])?;
    let mut artifacts = Vec::new();
    let probes = out.join("edge_probes.csv");
    fs::write(&probes, probe_csv(&edge))?;
    artifacts.push(probes);
    let reports = vec![lower, edge, upper, distance];
    let summary = reports
        .iter()
        .map(|r| {
            format!(
                "{}: constant={} applicable={} pass={}",
                r.name,
                r.measured_constant.map_or("-".into(), |c| format!("{c:.6e}")),
                r.applicable,
                r.pass
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    write_json(
        out.join("estimates.json"),
        &json!({ "potential": source, "reports": reports }),
        &mut artifacts,
    )?;
    Ok(Outcome {
        code: 0,
        summary: format!("validate ({source}):\n{summary}"),
        artifacts,
    })
}

fn run_barrier(rc: &Resolved, out: &Path) -> Result<Outcome> {
    let b = &rc.config.barrier;
    let check = rc.barrier_check()?;
    let edge = BarrierSpec::edge_for(&rc.polytope, b.alpha, b.beta)?;
    let cap = BarrierSpec::linear_cap_for(&rc.polytope, b.cap_alpha)?;
    let reports = [
        (edge.clone(), barrier_hessian_check(&edge, &check)?),
        (cap.clone(), barrier_hessian_check(&cap, &check)?),
    ];
    let schedule = alpha_schedule(rc.polytope.dim()).ok();
    let mut artifacts = Vec::new();
    write_json(
        out.join("barrier_report.json"),
        &json!({
            "checks": reports.iter().map(|(s, r)| json!({"spec": s, "report": r})).collect::<Vec<_>>(),
            "alpha_schedule": schedule,
        }),
        &mut artifacts,
    )?;
    let summary = reports
        .iter()
        .map(|(s, r)| {
            format!(
                "barrier {:?}: pass={} max discrepancy={:?}",
                s.kind, r.pass, r.measured_constant
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    Ok(Outcome {
        code: 0,
        summary,
        artifacts,
    })
}

fn run_legendre(rc: &Resolved, out: &Path) -> Result<Outcome> {
    let spec = &rc.config.legendre;
    let (u, source) = potential(rc, spec.potential.as_ref(), false)?;
    let shape = spec.dual_shape.clone().unwrap_or_else(|| u.grid().shape().to_vec());
    let sampler = PotentialSampler::new(&u, 0.0);
    let dual = legendre_default(&sampler, shape.clone())?;
    let samples = sampler.samples();
    let origin = conjugate_point(&sampler as &dyn ConvexSampler, &samples, &vec![0.0; u.dim()]);
    let check = duality_check(&u, spec.margin, shape.clone())?;
    let mut artifacts = Vec::new();
    let dump = out.join("dual.bin");
    write_dump(&dump, &dual.f)?;
    artifacts.push(dump);
    artifacts.push(out.join("dual.json"));
    write_json(
        out.join("legendre_report.json"),
        &json!({
            "potential": source,
            "dual_shape": shape,
            "clipped_nodes": dual.clipped.iter().filter(|c| **c).count(),
            "f_at_origin": origin.as_ref().map(|p| p.value),
            "duality": check,
        }),
        &mut artifacts,
    )?;
    let summary = format!(
        "legendre ({source}): young={:.3e} involution={:.3e} hessian={:.3e} f(0)={}",
        check.young,
        check.involution,
        check.hessian,
        origin.map_or("-".into(), |p| format!("{:.10}", p.value))
    );
    Ok(Outcome {
        code: 0,
        summary,
        artifacts,
    })
}

fn run_continuation(rc: &Resolved, out: &Path) -> Result<Outcome> {
    let seq = rc.sequence()?;
    let ccfg = ContinuationConfig {
        omega_margin: rc.config.continuation.omega_margin,
        family: rc.family(),
        seed: rc.seed("continuation")?,
    };
    let (_, report) = continuation(&rc.polytope, &seq, &rc.solver, &ccfg)?;
    let mut artifacts = Vec::new();
    write_json(out.join("continuation_report.json"), &report, &mut artifacts)?;
    let csv = out.join("continuation.csv");
    fs::write(&csv, report.to_csv())?;
    artifacts.push(csv);
    let refused = report.rows.iter().filter(|r| r.refused).count();
    let errors = report.rows.iter().filter(|r| r.error.is_some() && !r.refused).count();
    let summary = format!(
        "continuation: {} steps, {} refused, {} failed, gaps strictly decreasing={} final gap={:?} boundary mass uniform={}",
        report.rows.len(),
        refused,
        errors,
        report.gaps_strictly_decreasing,
        report.final_gap,
        report.boundary_mass_uniform
    );
    let code = if errors > 0 {
        1
    } else if refused > 0 {
        2
    } else {
        0
    };
    Ok(Outcome {
        code,
        summary,
        artifacts,
    })
}

const REPORT_SOURCES: [(&str, &str); 6] = [
    ("solve", "solve_report.json"),
    ("stability", "stability_report.json"),
    ("validate", "estimates.json"),
    ("barrier", "barrier_report.json"),
    ("legendre", "legendre_report.json"),
    ("continuation", "continuation_report.json"),
];

/// Aggregates the reports in the output directory. Solve and stability are
/// run first when their reports are missing.
fn run_report(rc: &Resolved, out: &Path) -> Result<Outcome> {
    let mut notes = Vec::new();
    let mut artifacts = Vec::new();
    if !out.join("solve_report.json").exists() {
        let o = run_solve(rc, out)?;
        notes.push(o.summary);
        artifacts.extend(o.artifacts);
    }
    if !out.join("stability_report.json").exists() && rc.config.seed.is_some() {
        let o = run_stability(rc, out)?;
        notes.push(o.summary);
        artifacts.extend(o.artifacts);
    }
    let mut sections = BTreeMap::new();
    for (name, file) in REPORT_SOURCES {
        let p = out.join(file);
        if let Ok(text) = fs::read_to_string(&p) {
            let v: Value = serde_json::from_str(&text)?;
            sections.insert(name.to_string(), v);
        }
    }
    let summary = summarize(&sections);
    write_json(out.join("report.json"), &sections, &mut artifacts)?;
    let txt = out.join("summary.txt");
    fs::write(&txt, format!("{summary}\n"))?;
    artifacts.push(txt);
    let converged = sections
        .get("solve")
        .and_then(|s| s.get("converged"))
        .and_then(Value::as_bool)
        .unwrap_or(false);
    notes.push(summary);
    Ok(Outcome {
        code: if converged { 0 } else { 1 },
        summary: notes.join("\n"),
        artifacts,
    })
}

fn summarize(sections: &BTreeMap<String, Value>) -> String {
    let num = |v: &Value, k: &str| {
        v.get(k)
            .and_then(Value::as_f64)
            .map_or("-".into(), |x| format!("{x:.6e}"))
    };
    let mut lines = Vec::new();
    if let Some(s) = sections.get("solve") {
        lines.push(format!(
            "solve         converged={} residual={} identity_gap={} mabuchi={}",
            s.get("converged").unwrap_or(&Value::Null),
            s.get("residual").map_or("-".into(), |r| num(r, "primal")),
            num(s, "identity_gap"),
            num(s, "mabuchi")
        ));
    }
    if let Some(s) = sections.get("stability").and_then(|s| s.get("report")) {
        lines.push(format!(
            "stability     lambda_hat={} ({})",
            num(s, "lambda_hat"),
            s.get("label").and_then(Value::as_str).unwrap_or("-")
        ));
    }
    if let Some(Value::Array(rs)) = sections.get("validate").and_then(|s| s.get("reports")) {
        for r in rs {
            lines.push(format!(
                "estimate      {} constant={} pass={}",
                r.get("name").and_then(Value::as_str).unwrap_or("-"),
                num(r, "measured_constant"),
                r.get("pass").unwrap_or(&Value::Null)
            ));
        }
    }
    if let Some(Value::Array(cs)) = sections.get("barrier").and_then(|s| s.get("checks")) {
        for c in cs {
            lines.push(format!(
                "barrier       {} pass={}",
                c.get("spec").and_then(|s| s.get("kind")).unwrap_or(&Value::Null),
                c.get("report").and_then(|r| r.get("pass")).unwrap_or(&Value::Null)
            ));
        }
    }
    if let Some(l) = sections.get("legendre") {
        lines.push(format!(
            "legendre      f(0)={} involution={}",
            num(l, "f_at_origin"),
            l.get("duality").map_or("-".into(), |d| num(d, "involution"))
        ));
    }
    if let Some(c) = sections.get("continuation") {
        lines.push(format!(
            "continuation  gaps_strictly_decreasing={} final_gap={}",
            c.get("gaps_strictly_decreasing").unwrap_or(&Value::Null),
            num(c, "final_gap")
        ));
    }
    if lines.is_empty() {
        "no reports found".into()
    } else {
        lines.join("\n")
    }
}
