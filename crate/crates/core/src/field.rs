//! Scalar data on the closed polytope: densities D and A, and analytic
//! smooth functions used as exact potential parts.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::discretize::GridFn;

/// A smooth function with exact first and second derivatives.
pub trait Smooth: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    /// Row-major n x n Hessian.
    fn hessian(&self, x: &[f64]) -> Vec<f64>;
}

/// One monomial coef * prod x_i^powers_i.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coef: f64,
    pub powers: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub terms: Vec<Term>,
}

fn ipow(x: f64, p: u32) -> f64 {
    x.powi(p as i32)
}

impl Polynomial {
    pub fn new(terms: Vec<(f64, Vec<u32>)>) -> Self {
        Polynomial {
            terms: terms.into_iter().map(|(coef, powers)| Term { coef, powers }).collect(),
        }
    }

    pub fn constant(c: f64, dim: usize) -> Self {
        Polynomial::new(vec![(c, vec![0; dim])])
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|t| t.powers.iter().sum()).max().unwrap_or(0)
    }

    /// Derivative of x^p in one variable, scaled: returns (factor, new power).
    fn dpow(p: u32) -> (f64, u32) {
        if p == 0 {
            (0.0, 0)
        } else {
            (p as f64, p - 1)
        }
    }
}

impl Smooth for Polynomial {
    fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coef * t.powers.iter().zip(x).map(|(p, xi)| ipow(*xi, *p)).product::<f64>())
            .sum()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut g = vec![0.0; n];
        for t in &self.terms {
            for (i, gi) in g.iter_mut().enumerate() {
                let (f, q) = Polynomial::dpow(t.powers[i]);
                if f == 0.0 {
                    continue;
                }
                let mut m = t.coef * f;
                for k in 0..n {
                    m *= ipow(x[k], if k == i { q } else { t.powers[k] });
                }
                *gi += m;
            }
        }
        g
    }

    fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut h = vec![0.0; n * n];
        for t in &self.terms {
            for i in 0..n {
                for j in i..n {
                    let mut p = t.powers.clone();
                    let (f1, q1) = Polynomial::dpow(p[i]);
                    p[i] = q1;
                    let (f2, q2) = Polynomial::dpow(p[j]);
                    p[j] = q2;
                    let f = f1 * f2;
                    if f == 0.0 {
                        continue;
                    }
                    let m = t.coef * f * p.iter().zip(x).map(|(a, b)| ipow(*b, *a)).product::<f64>();
                    h[i * n + j] += m;
                    if i != j {
                        h[j * n + i] += m;
                    }
                }
            }
        }
        h
    }
}

/// Data field on the closed polytope.
#[derive(Clone)]
pub enum ScalarField {
    Constant(f64),
    Polynomial(Polynomial),
    /// Grid samples, multilinearly interpolated.
    Sampled(Arc<GridFn>),
    Custom(Arc<dyn Smooth>),
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarField::Constant(c) => write!(f, "Constant({c})"),
            ScalarField::Polynomial(p) => write!(f, "Polynomial({} terms)", p.terms.len()),
            ScalarField::Sampled(g) => write!(f, "Sampled({:?})", g.grid().shape()),
            ScalarField::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl ScalarField {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ScalarField::Constant(c) => *c,
            ScalarField::Polynomial(p) => p.value(x),
            ScalarField::Sampled(g) => g.interpolate(x),
            ScalarField::Custom(s) => s.value(x),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ScalarField::Constant(_) => vec![0.0; x.len()],
            ScalarField::Polynomial(p) => p.gradient(x),
            ScalarField::Custom(s) => s.gradient(x),
            ScalarField::Sampled(g) => {
                let h = g.grid().h();
                (0..x.len())
                    .map(|i| {
                        let mut a = x.to_vec();
                        let mut b = x.to_vec();
                        a[i] += 0.5 * h[i];
                        b[i] -= 0.5 * h[i];
                        (g.interpolate(&a) - g.interpolate(&b)) / h[i]
                    })
                    .collect()
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ScalarField::Constant(_))
    }
}

/// The pair (D, A) of the equation.
#[derive(Clone, Debug)]
pub struct DensityPair {
    pub d: ScalarField,
    pub a: ScalarField,
}

impl DensityPair {
    pub fn new(d: ScalarField, a: ScalarField) -> Self {
        DensityPair { d, a }
    }

    pub fn constant(d: f64, a: f64) -> Self {
        DensityPair::new(ScalarField::Constant(d), ScalarField::Constant(a))
    }
}
