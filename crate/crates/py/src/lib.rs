//! Python bindings for abreu-core.
//!
//! Reports come back as plain dicts (decoded from their JSON form), arrays as
//! nested lists.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use abreu_core::cli::{self, Subcommand};
use abreu_core::discretize::{io, Grid};
use abreu_core::field::{DensityPair, Polynomial, ScalarField};
use abreu_core::functionals::{self, stability::FamilyConfig};
use abreu_core::legendre;
use abreu_core::operator::{self, Form, ResidualOptions};
use abreu_core::polytope;
use abreu_core::potentials::{guillemin, SPotential};
use abreu_core::solver::{self, SolveConfig};
use abreu_core::Error;

create_exception!(abreu_lab, AbreuError, PyException, "Error raised by abreu-core.");
create_exception!(
    abreu_lab,
    RefusalError,
    AbreuError,
    "Input refused by validation (affine defect, bad config)."
);

fn err(e: Error) -> PyErr {
    let msg = format!("{} error: {e}", e.module());
    if e.is_refusal() {
        RefusalError::new_err(msg)
    } else {
        AbreuError::new_err(msg)
    }
}

fn to_dict<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| AbreuError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A density: a constant or a list of (coefficient, exponents) terms.
#[derive(FromPyObject)]
enum FieldArg {
    Constant(f64),
    Terms(Vec<(f64, Vec<u32>)>),
}

impl FieldArg {
    fn field(self) -> ScalarField {
        match self {
            FieldArg::Constant(c) => ScalarField::Constant(c),
            FieldArg::Terms(t) => ScalarField::Polynomial(Polynomial::new(t)),
        }
    }
}

fn densities(a: FieldArg, d: Option<FieldArg>) -> DensityPair {
    DensityPair::new(d.map_or(ScalarField::Constant(1.0), FieldArg::field), a.field())
}

/// Convex polytope {xi : <a_k, xi> + b_k >= 0}.
#[pyclass(name = "Polytope", module = "abreu_lab", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPolytope(Arc<polytope::Polytope>);

#[pymethods]
impl PyPolytope {
    /// Rows are [a_k..., b_k].
    #[new]
    #[pyo3(signature = (rows, vertices=None))]
    fn new(rows: Vec<Vec<f64>>, vertices: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        Ok(PyPolytope(Arc::new(
            polytope::Polytope::from_rows(&rows, vertices).map_err(err)?,
        )))
    }

    #[staticmethod]
    fn interval(lo: f64, hi: f64) -> Self {
        PyPolytope(Arc::new(polytope::Polytope::interval(lo, hi)))
    }

    #[staticmethod]
    #[pyo3(name = "box")]
    fn cuboid(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        PyPolytope(Arc::new(polytope::Polytope::cuboid(&lo, &hi)))
    }

    #[staticmethod]
    fn unit_cube(dim: usize) -> Self {
        PyPolytope(Arc::new(polytope::Polytope::unit_cube(dim)))
    }

    #[staticmethod]
    fn simplex(dim: usize) -> Self {
        PyPolytope(Arc::new(polytope::Polytope::simplex(dim)))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.to_rows()
    }

    #[getter]
    fn vertices(&self) -> Vec<Vec<f64>> {
        self.0.vertices().to_vec()
    }

    fn facet_distances(&self, xi: Vec<f64>) -> Vec<f64> {
        self.0.facet_distances(&xi)
    }

    fn contains(&self, xi: Vec<f64>) -> bool {
        self.0.facet_distances(&xi).iter().all(|d| *d > 0.0)
    }

    fn guillemin(&self, xi: Vec<f64>) -> PyResult<f64> {
        Ok(guillemin::guillemin_eval(&self.0, &xi).map_err(err)?.value)
    }

    fn guillemin_hessian(&self, xi: Vec<f64>) -> PyResult<Vec<f64>> {
        guillemin::guillemin_hessian(&self.0, &xi).map_err(err)
    }

    /// det(v_ij) * prod_k l_k.
    fn guillemin_det_product(&self, xi: Vec<f64>) -> PyResult<f64> {
        guillemin::guillemin_det_product(&self.0, &xi).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Polytope(dim={}, facets={})", self.0.dim(), self.0.facets().len())
    }
}

/// Symplectic potential u = v + phi sampled on a grid.
#[pyclass(name = "Potential", module = "abreu_lab", frozen)]
struct PyPotential(SPotential);

#[pymethods]
impl PyPotential {
    /// Pure Guillemin potential on a grid of spacing h.
    #[staticmethod]
    #[pyo3(signature = (poly, h, p_o=None))]
    fn guillemin(poly: &PyPolytope, h: f64, p_o: Option<Vec<f64>>) -> PyResult<Self> {
        let p_o = p_o.unwrap_or_else(|| poly.0.vertex_centroid());
        Ok(PyPotential(SPotential::guillemin(poly.0.clone(), h, p_o).map_err(err)?))
    }

    /// Reads a phi dump (.bin or .json) written by `save` or the CLI.
    #[staticmethod]
    #[pyo3(signature = (path, poly, p_o=None))]
    fn load(path: PathBuf, poly: &PyPolytope, p_o: Option<Vec<f64>>) -> PyResult<Self> {
        let phi = io::read_dump(&path, Some(poly.0.clone())).map_err(err)?;
        let p_o = p_o.unwrap_or_else(|| poly.0.vertex_centroid());
        Ok(PyPotential(SPotential::new(phi, p_o).map_err(err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_dump(&path, self.0.phi()).map_err(err)
    }

    #[getter]
    fn polytope(&self) -> PyPolytope {
        PyPolytope(self.0.polytope().clone())
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.grid().shape().to_vec()
    }

    #[getter]
    fn h(&self) -> Vec<f64> {
        self.0.grid().h().to_vec()
    }

    #[getter]
    fn p_o(&self) -> Vec<f64> {
        self.0.p_o().to_vec()
    }

    /// Active nodes and the values of u there.
    fn nodes(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let g = self.0.grid();
        g.active_nodes()
            .into_iter()
            .map(|i| (g.node(i), self.0.node_value(i)))
            .unzip()
    }

    /// Values of phi over the whole grid (NaN off the polytope).
    fn phi(&self) -> Vec<f64> {
        self.0.phi().values().to_vec()
    }

    fn value(&self, xi: Vec<f64>) -> f64 {
        self.0.value_at(&xi)
    }

    fn gradient(&self, xi: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.gradient_at(&xi).map_err(err)
    }

    /// Row-major n x n Hessian.
    fn hessian(&self, xi: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.hessian_at(&xi).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Potential(shape={:?}, p_o={:?})", self.0.grid().shape(), self.0.p_o())
    }
}

/// Minimizes the Mabuchi functional. Returns (potential, report).
#[pyfunction]
#[pyo3(signature = (poly, a, d=None, h=None, p_o=None, max_iterations=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn solve<'py>(
    py: Python<'py>,
    poly: &PyPolytope,
    a: FieldArg,
    d: Option<FieldArg>,
    h: Option<f64>,
    p_o: Option<Vec<f64>>,
    max_iterations: Option<usize>,
    seed: u64,
) -> PyResult<(PyPotential, Bound<'py, PyAny>)> {
    let mut cfg = SolveConfig {
        p_o,
        seed,
        ..Default::default()
    };
    if let Some(h) = h {
        cfg.h = h;
    }
    if let Some(m) = max_iterations {
        cfg.max_iterations = m;
    }
    let dp = densities(a, d);
    let poly = poly.0.clone();
    let (u, report) = py.detach(|| solver::solve(&poly, &dp, &cfg)).map_err(err)?;
    Ok((PyPotential(u), to_dict(py, &report)?))
}

/// Family infimum of L_A(u) / int u D dsigma over seeded PL members.
#[pyfunction]
#[pyo3(signature = (poly, a, seed, d=None, p_o=None, max_kinks=2, samples=256, allow_affine_defect=false))]
#[allow(clippy::too_many_arguments)]
fn stability_lambda<'py>(
    py: Python<'py>,
    poly: &PyPolytope,
    a: FieldArg,
    seed: u64,
    d: Option<FieldArg>,
    p_o: Option<Vec<f64>>,
    max_kinks: usize,
    samples: usize,
    allow_affine_defect: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let fam = FamilyConfig {
        max_kinks,
        samples,
        allow_affine_defect,
        ..Default::default()
    };
    let dp = densities(a, d);
    let poly = poly.0.clone();
    let r = py
        .detach(|| functionals::stability::stability_lambda(&poly, &dp, &fam, seed, p_o))
        .map_err(err)?;
    to_dict(py, &r)
}

/// L_A on the affine functions 1, xi_1, ..., xi_n.
#[pyfunction]
#[pyo3(signature = (poly, a, d=None, h=1.0 / 64.0))]
fn affine_defect(poly: &PyPolytope, a: FieldArg, d: Option<FieldArg>, h: f64) -> PyResult<Vec<f64>> {
    functionals::affine_defect(&poly.0, &densities(a, d), h).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (u, a, d=None))]
fn l_functional(u: &PyPotential, a: FieldArg, d: Option<FieldArg>) -> f64 {
    functionals::l_functional(&u.0, &densities(a, d))
}

#[pyfunction]
#[pyo3(signature = (u, a, d=None))]
fn mabuchi(u: &PyPotential, a: FieldArg, d: Option<FieldArg>) -> PyResult<f64> {
    functionals::mabuchi(&u.0, &densities(a, d), operator::DEFAULT_DET_FLOOR).map_err(err)
}

/// Sup norm of the residual in one form ("primal", "cofactor" or "dual").
#[pyfunction]
#[pyo3(signature = (u, a, d=None, form="primal", margin=None))]
fn abreu_residual(
    py: Python<'_>,
    u: &PyPotential,
    a: FieldArg,
    d: Option<FieldArg>,
    form: &str,
    margin: Option<f64>,
) -> PyResult<f64> {
    let form = match form {
        "primal" => Form::Primal,
        "cofactor" => Form::Cofactor,
        "dual" => Form::Dual,
        other => return Err(RefusalError::new_err(format!("unknown residual form {other:?}"))),
    };
    let opts = ResidualOptions {
        margin,
        ..Default::default()
    };
    let dp = densities(a, d);
    let r = py
        .detach(|| operator::abreu_residual(&u.0, &dp, form, &opts))
        .map_err(err)?;
    Ok(r.sup)
}

/// Young, involution and Hessian duality of the discrete Legendre transform.
#[pyfunction]
#[pyo3(signature = (u, margin=0.1, dual_shape=None))]
fn duality_check<'py>(
    py: Python<'py>,
    u: &PyPotential,
    margin: f64,
    dual_shape: Option<Vec<usize>>,
) -> PyResult<Bound<'py, PyAny>> {
    let shape = dual_shape.unwrap_or_else(|| u.0.grid().shape().to_vec());
    let r = py
        .detach(|| legendre::duality_check(&u.0, margin, shape))
        .map_err(err)?;
    to_dict(py, &r)
}

/// Legendre transform of u on its default dual box.
/// Returns (dual nodes, f values, clipped flags).
#[pyfunction]
#[pyo3(signature = (u, dual_shape=None))]
#[allow(clippy::type_complexity)]
fn legendre_transform(
    py: Python<'_>,
    u: &PyPotential,
    dual_shape: Option<Vec<usize>>,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<bool>)> {
    let shape = dual_shape.unwrap_or_else(|| u.0.grid().shape().to_vec());
    let dual = py
        .detach(|| legendre::legendre_default(&legendre::PotentialSampler::new(&u.0, 0.0), shape))
        .map_err(err)?;
    let g: &Arc<Grid> = dual.grid();
    let nodes = (0..g.len()).map(|i| g.node(i)).collect();
    Ok((nodes, dual.f.values().to_vec(), dual.clipped.clone()))
}

/// Runs a CLI subcommand in-process and returns (exit code, summary).
#[pyfunction]
#[pyo3(signature = (subcommand, config, overrides=None))]
fn run_cli(
    py: Python<'_>,
    subcommand: &str,
    config: PathBuf,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<(i32, String)> {
    let sub = Subcommand::ALL
        .iter()
        .copied()
        .find(|s| s.name() == subcommand)
        .ok_or_else(|| RefusalError::new_err(format!("unknown subcommand {subcommand:?}")))?;
    let mut args = Vec::new();
    if let Some(o) = overrides {
        for (k, v) in o.iter() {
            args.push(format!("--{}", k.extract::<String>()?));
            args.push(v.str()?.extract::<String>()?);
        }
    }
    let overrides = cli::parse_overrides(&args).map_err(err)?;
    let r = py.detach(|| cli::run(sub, &config, &overrides));
    let code = cli::exit_code(&r);
    Ok(match r {
        Ok(o) => (code, o.summary),
        Err(e) => (code, format!("{} error: {e}", e.module())),
    })
}

#[pymodule]
fn abreu_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AbreuError", m.py().get_type::<AbreuError>())?;
    m.add("RefusalError", m.py().get_type::<RefusalError>())?;
    m.add_class::<PyPolytope>()?;
    m.add_class::<PyPotential>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(stability_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(affine_defect, m)?)?;
    m.add_function(wrap_pyfunction!(l_functional, m)?)?;
    m.add_function(wrap_pyfunction!(mabuchi, m)?)?;
    m.add_function(wrap_pyfunction!(abreu_residual, m)?)?;
    m.add_function(wrap_pyfunction!(duality_check, m)?)?;
    m.add_function(wrap_pyfunction!(legendre_transform, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
