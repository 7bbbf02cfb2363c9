//! Run configuration: JSON with a versioned `schema` field. Flags override
//! leaves of the fully defaulted tree by dotted path.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Subcommand;
use crate::discretize::io::read_dump;
use crate::error::{Error, Result};
use crate::estimates::{BarrierCheckConfig, UpperConfig};
use crate::field::{DensityPair, Polynomial, ScalarField, Term};
use crate::functionals::FamilyConfig;
use crate::polytope::Polytope;
use crate::solver::{balanced_interval_sequence, SolveConfig};

pub const SCHEMA: &str = "abreu-lab/v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolytopeSpec {
    Interval {
        lo: f64,
        hi: f64,
    },
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    UnitCube {
        dim: usize,
    },
    Simplex {
        dim: usize,
    },
    /// Rows [a_1, ..., a_n, b] of <a, xi> + b >= 0.
    Halfspaces {
        rows: Vec<Vec<f64>>,
        #[serde(default)]
        vertices: Option<Vec<Vec<f64>>>,
    },
}

impl PolytopeSpec {
    pub fn build(&self) -> Result<Polytope> {
        match self {
            PolytopeSpec::Interval { lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::config("polytope", "interval needs lo < hi"));
                }
                Ok(Polytope::interval(*lo, *hi))
            }
            PolytopeSpec::Box { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                    return Err(Error::config("polytope", "box needs lo < hi in every coordinate"));
                }
                Ok(Polytope::cuboid(lo, hi))
            }
            PolytopeSpec::UnitCube { dim } if *dim >= 1 => Ok(Polytope::unit_cube(*dim)),
            PolytopeSpec::Simplex { dim } if *dim >= 1 => Ok(Polytope::simplex(*dim)),
            PolytopeSpec::UnitCube { .. } | PolytopeSpec::Simplex { .. } => {
                Err(Error::config("polytope.dim", "must be positive"))
            }
            PolytopeSpec::Halfspaces { rows, vertices } => Polytope::from_rows(rows, vertices.clone()),
        }
    }
}

/// A number, `{"polynomial": [{"coef": c, "powers": [..]}, ..]}` or
/// `{"grid": "<dump path>"}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Constant(f64),
    Table(FieldTable),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldTable {
    Polynomial(Vec<Term>),
    Grid(PathBuf),
}

impl FieldSpec {
    pub fn build(&self, name: &str, dim: usize, base: &Path) -> Result<ScalarField> {
        match self {
            FieldSpec::Constant(c) if c.is_finite() => Ok(ScalarField::Constant(*c)),
            FieldSpec::Constant(_) => Err(Error::config(name, "must be finite")),
            FieldSpec::Table(FieldTable::Polynomial(terms)) => {
                for (i, t) in terms.iter().enumerate() {
                    if t.powers.len() != dim || !t.coef.is_finite() {
                        return Err(Error::config(
                            format!("{name}.polynomial[{i}]"),
                            format!("needs a finite coef and {dim} powers"),
                        ));
                    }
                }
                Ok(ScalarField::Polynomial(Polynomial { terms: terms.clone() }))
            }
            FieldSpec::Table(FieldTable::Grid(p)) => {
                let g = read_dump(&resolve(base, p), None)?;
                if g.grid().dim() != dim {
                    return Err(Error::config(
                        format!("{name}.grid"),
                        "dimension differs from the polytope",
                    ));
                }
                Ok(ScalarField::Sampled(Arc::new(g)))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    /// A_k = 2 + (6 xi^2 - 6 xi + 1)/k on (0, 1).
    Balanced,
    /// A_k = base + 1/k.
    Harmonic,
    /// The fields in `a`, in order.
    List,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationSpec {
    pub kind: SequenceKind,
    pub k_max: usize,
    pub base: f64,
    pub a: Vec<FieldSpec>,
    pub omega_margin: f64,
}

impl Default for ContinuationSpec {
    fn default() -> Self {
        ContinuationSpec {
            kind: SequenceKind::Balanced,
            k_max: 8,
            base: 2.0,
            a: Vec::new(),
            omega_margin: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSpec {
    /// phi dump written by `solve`; None validates the Guillemin potential.
    pub potential: Option<PathBuf>,
    pub upper: UpperConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarrierSection {
    pub alpha: f64,
    pub beta: f64,
    pub cap_alpha: f64,
    pub check: BarrierCheckConfig,
}

impl Default for BarrierSection {
    fn default() -> Self {
        BarrierSection {
            alpha: 0.5,
            beta: 0.5,
            cap_alpha: 1.25,
            check: BarrierCheckConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LegendreSpec {
    pub potential: Option<PathBuf>,
    /// Duality diagnostics use primal nodes with every delta_k >= margin.
    pub margin: f64,
    pub dual_shape: Option<Vec<usize>>,
}

impl Default for LegendreSpec {
    fn default() -> Self {
        LegendreSpec {
            potential: None,
            margin: 0.1,
            dual_shape: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub defect_tol: Option<f64>,
    pub residual_tol: Option<f64>,
    pub identity_tol: Option<f64>,
    pub barrier_tol: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub polytope: PolytopeSpec,
    #[serde(default = "one")]
    pub d: FieldSpec,
    pub a: FieldSpec,
    /// Grid spacing; overrides solver.h when present.
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default)]
    pub p_o: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub solver: SolveConfig,
    #[serde(default)]
    pub stability: FamilyConfig,
    #[serde(default)]
    pub continuation: ContinuationSpec,
    #[serde(default)]
    pub validate: ValidateSpec,
    #[serde(default)]
    pub barrier: BarrierSection,
    #[serde(default)]
    pub legendre: LegendreSpec,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub thresholds: Thresholds,
}

fn one() -> FieldSpec {
    FieldSpec::Constant(1.0)
}

fn default_output() -> PathBuf {
    PathBuf::from("abreu-out")
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// A validated configuration with its derived objects.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    /// Directory of the config file; relative input paths resolve here.
    pub base: PathBuf,
    pub polytope: Arc<Polytope>,
    pub density: DensityPair,
    pub solver: SolveConfig,
}

impl Resolved {
    pub fn seed(&self, consumer: &str) -> Result<u64> {
        self.config
            .seed
            .ok_or_else(|| Error::config("seed", format!("{consumer} samples randomly and needs a seed")))
    }

    pub fn input(&self, p: &Path) -> PathBuf {
        resolve(&self.base, p)
    }

    pub fn family(&self) -> FamilyConfig {
        let mut f = self.config.stability.clone();
        if let Some(t) = self.config.thresholds.defect_tol {
            f.defect_tol = Some(t);
        }
        f
    }

    pub fn barrier_check(&self) -> Result<BarrierCheckConfig> {
        let mut c = self.config.barrier.check.clone();
        c.seed = self.seed("barrier")?;
        if let Some(t) = self.config.thresholds.barrier_tol {
            c.tol = t;
        }
        Ok(c)
    }

    pub fn sequence(&self) -> Result<Vec<DensityPair>> {
        let spec = &self.config.continuation;
        let n = self.polytope.dim();
        match spec.kind {
            SequenceKind::Balanced => {
                let unit = matches!(self.config.polytope, PolytopeSpec::Interval { lo, hi } if lo == 0.0 && hi == 1.0);
                if !unit {
                    return Err(Error::config(
                        "continuation.kind",
                        "balanced sequence is defined on the interval (0, 1)",
                    ));
                }
                if !matches!(self.config.d, FieldSpec::Constant(c) if c == 1.0) {
                    return Err(Error::config("continuation.kind", "balanced sequence assumes d = 1"));
                }
                Ok(balanced_interval_sequence(spec.k_max))
            }
            SequenceKind::Harmonic => Ok((1..=spec.k_max)
                .map(|k| {
                    DensityPair::new(
                        self.density.d.clone(),
                        ScalarField::Constant(spec.base + 1.0 / k as f64),
                    )
                })
                .collect()),
            SequenceKind::List => spec
                .a
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    Ok(DensityPair::new(
                        self.density.d.clone(),
                        a.build(&format!("continuation.a[{i}]"), n, &self.base)?,
                    ))
                })
                .collect(),
        }
    }
}

fn config_error<E: std::fmt::Display>(e: serde_path_to_error::Error<E>) -> Error {
    let path = e.path().to_string();
    Error::config(if path == "." { "<root>".into() } else { path }, e.inner().to_string())
}

/// Parses a flag value as JSON, falling back to a plain string.
pub fn flag_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

fn section_of(sub: Subcommand) -> Option<&'static str> {
    match sub {
        Subcommand::Solve => Some("solver"),
        Subcommand::Stability => Some("stability"),
        Subcommand::Validate => Some("validate"),
        Subcommand::Barrier => Some("barrier"),
        Subcommand::Legendre => Some("legendre"),
        Subcommand::Continuation => Some("continuation"),
        Subcommand::Report => None,
    }
}

fn leaf_paths(v: &Value, prefix: &mut Vec<String>, key: &str, out: &mut Vec<Vec<String>>) {
    if let Value::Object(m) = v {
        for (k, c) in m {
            prefix.push(k.clone());
            if k == key && !c.is_object() {
                out.push(prefix.clone());
            }
            leaf_paths(c, prefix, key, out);
            prefix.pop();
        }
    }
}

/// Path for a flag key: a dotted path as given; a bare key at the top
/// level, then in the subcommand's section, then anywhere if unique.
/// Input paths typed on the command line are relative to the working
/// directory, not to the config file.
fn from_cwd(key: &str, v: &Value) -> Result<Value> {
    let is_input = matches!(key.rsplit('.').next(), Some("potential" | "grid"));
    match v {
        Value::String(s) if is_input && Path::new(s).is_relative() => {
            Ok(Value::String(std::env::current_dir()?.join(s).display().to_string()))
        }
        _ => Ok(v.clone()),
    }
}

fn resolve_key(tree: &Value, key: &str, sub: Subcommand) -> Result<Vec<String>> {
    if key.contains('.') {
        return Ok(key.split('.').map(String::from).collect());
    }
    if tree.get(key).is_some() {
        return Ok(vec![key.to_string()]);
    }
    if let Some(s) = section_of(sub) {
        if tree.get(s).and_then(|v| v.get(key)).is_some() {
            return Ok(vec![s.to_string(), key.to_string()]);
        }
    }
    let mut found = Vec::new();
    leaf_paths(tree, &mut Vec::new(), key, &mut found);
    match found.len() {
        0 => Err(Error::config(key, "unknown configuration key")),
        1 => Ok(found.pop().expect("one path")),
        _ => Err(Error::config(
            key,
            format!(
                "ambiguous key, use one of {}",
                found.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
            ),
        )),
    }
}

pub fn apply_override(tree: &mut Value, key: &str, value: Value, sub: Subcommand) -> Result<()> {
    let path = resolve_key(tree, key, sub)?;
    let dotted = path.join(".");
    let mut cur = tree;
    for (i, k) in path.iter().enumerate() {
        let Value::Object(m) = cur else {
            return Err(Error::config(&dotted, "path does not name a configuration leaf"));
        };
        let Some(next) = m.get_mut(k) else {
            return Err(Error::config(&dotted, "unknown configuration key"));
        };
        if i + 1 == path.len() {
            if next.is_object() {
                return Err(Error::config(&dotted, "only leaves can be overridden"));
            }
            *next = value;
            return Ok(());
        }
        cur = next;
    }
    Err(Error::config(key, "empty key"))
}

/// Reads, overrides and validates a configuration.
pub fn load(path: &Path, sub: Subcommand, overrides: &[(String, Value)]) -> Result<Resolved> {
    let text = fs::read_to_string(path)?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| Error::config("<root>", e.to_string()))?;
    match raw.get("schema").and_then(Value::as_str) {
        Some(SCHEMA) => {}
        Some(other) => {
            return Err(Error::config(
                "schema",
                format!("unsupported schema {other:?}, expected {SCHEMA:?}"),
            ))
        }
        None => return Err(Error::config("schema", format!("missing, expected {SCHEMA:?}"))),
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(raw).map_err(config_error)?;
    let mut tree = serde_json::to_value(&cfg)?;
    for (k, v) in overrides {
        apply_override(&mut tree, k, from_cwd(k, v)?, sub)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(tree).map_err(config_error)?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."));
    resolve_config(cfg, base)
}

pub fn resolve_config(cfg: RunConfig, base: PathBuf) -> Result<Resolved> {
    if cfg.schema != SCHEMA {
        return Err(Error::config("schema", format!("expected {SCHEMA:?}")));
    }
    let poly = Arc::new(cfg.polytope.build()?);
    let n = poly.dim();
    let d = cfg.d.build("d", n, &base)?;
    let a = cfg.a.build("a", n, &base)?;
    if let Some(p) = &cfg.p_o {
        if p.len() != n {
            return Err(Error::config("p_o", format!("needs {n} coordinates")));
        }
        if poly.require_interior(p).is_err() {
            return Err(Error::config("p_o", "must lie strictly inside the polytope"));
        }
    }
    let mut solver = cfg.solver.clone();
    if let Some(h) = cfg.h {
        solver.h = h;
    }
    if cfg.p_o.is_some() {
        solver.p_o = cfg.p_o.clone();
    }
    if let Some(s) = cfg.seed {
        solver.seed = s;
    }
    let t = &cfg.thresholds;
    solver.defect_tol = t.defect_tol.or(solver.defect_tol);
    solver.residual_tol = t.residual_tol.or(solver.residual_tol);
    if let Some(v) = t.identity_tol {
        solver.identity_tol = v;
    }
    solver.validate()?;
    Ok(Resolved {
        density: DensityPair::new(d, a),
        polytope: poly,
        solver,
        base,
        config: cfg,
    })
}
