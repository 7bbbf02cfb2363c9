//! Explicit convex barriers near the facet xi_1 = 0 and the exponent
//! schedule used to bootstrap determinant lower bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::polytope::Polytope;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BarrierKind {
    /// v = -xi_1^a (C - xi_1)^b (C - |xi'|^2)^b
    EdgeBarrier,
    /// v' = xi_1^a (C + |xi'|^2) - a_lin xi_1
    LinearCapBarrier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    pub kind: BarrierKind,
    pub dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    /// Linear coefficient of the cap barrier; unused by the edge barrier.
    pub a: f64,
}

/// m = 8n.
pub fn barrier_m(n: usize) -> f64 {
    8.0 * n as f64
}

/// m (1 + max over vertices of max(xi_1, |xi'|^2)).
pub fn default_c(poly: &Polytope) -> f64 {
    let worst = poly
        .vertices()
        .iter()
        .map(|v| v[0].max(v[1..].iter().map(|x| x * x).sum()))
        .fold(0.0, f64::max);
    barrier_m(poly.dim()) * (1.0 + worst)
}

impl BarrierSpec {
    pub fn edge(dim: usize, alpha: f64, beta: f64, c: f64) -> Result<Self> {
        if dim < 1 {
            return Err(Error::OutOfRange("dimension must be positive".into()));
        }
        let lo = 1.0 / (2.0 * dim as f64);
        let hi = 1.0 - lo;
        for (name, x) in [("alpha", alpha), ("beta", beta)] {
            if !(lo..=hi).contains(&x) {
                return Err(Error::OutOfRange(format!(
                    "{name} = {x} outside the admissible range [{lo}, {hi}]"
                )));
            }
        }
        if !(c > 0.0) {
            return Err(Error::OutOfRange(format!("C must be positive, got {c}")));
        }
        Ok(BarrierSpec {
            kind: BarrierKind::EdgeBarrier,
            dim,
            alpha,
            beta,
            c,
            a: 0.0,
        })
    }

    pub fn edge_for(poly: &Polytope, alpha: f64, beta: f64) -> Result<Self> {
        BarrierSpec::edge(poly.dim(), alpha, beta, default_c(poly))
    }

    pub fn linear_cap(dim: usize, alpha: f64, c: f64, a: f64) -> Result<Self> {
        if !(alpha > 1.0) {
            return Err(Error::OutOfRange(format!("cap exponent must exceed 1, got {alpha}")));
        }
        if !(c > 0.0) || !(a > 0.0) {
            return Err(Error::OutOfRange("C and a must be positive".into()));
        }
        Ok(BarrierSpec {
            kind: BarrierKind::LinearCapBarrier,
            dim,
            alpha,
            beta: 0.0,
            c,
            a,
        })
    }

    /// Cap barrier with C from `default_c` and the smallest a (plus 1%)
    /// making v' <= 0 on the containment region.
    pub fn linear_cap_for(poly: &Polytope, alpha: f64) -> Result<Self> {
        let c = default_c(poly);
        let r = c / barrier_m(poly.dim());
        // on {xi_1 <= r, |xi'|^2 <= r}: v' <= xi_1 (r^(alpha-1) (C + r) - a)
        let a = 1.01 * r.powf(alpha - 1.0) * (c + r);
        BarrierSpec::linear_cap(poly.dim(), alpha, c, a)
    }

    pub fn m(&self) -> f64 {
        barrier_m(self.dim)
    }

    /// Containment Delta in {xi_1 <= C/m} and {|xi'|^2 <= C/m}, checked on
    /// the vertices (both sets are convex).
    pub fn contains_polytope(&self, poly: &Polytope) -> bool {
        let r = self.c / self.m();
        poly.vertices()
            .iter()
            .all(|v| v[0] <= r && v[1..].iter().map(|x| x * x).sum::<f64>() <= r)
    }

    /// Sample region used by validators: xi_1 in (0, C/m], |xi'|^2 <= C/m.
    pub fn admissible(&self, xi: &[f64]) -> bool {
        let r = self.c / self.m();
        xi[0] > 0.0 && xi[0] <= r && xi[1..].iter().map(|x| x * x).sum::<f64>() <= r
    }

    pub fn value(&self, xi: &[f64]) -> Result<f64> {
        self.check_domain(xi)?;
        let s: f64 = xi[1..].iter().map(|x| x * x).sum();
        Ok(match self.kind {
            BarrierKind::EdgeBarrier => {
                -xi[0].powf(self.alpha) * (self.c - xi[0]).powf(self.beta) * (self.c - s).powf(self.beta)
            }
            BarrierKind::LinearCapBarrier => xi[0].powf(self.alpha) * (self.c + s) - self.a * xi[0],
        })
    }

    fn check_domain(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.dim {
            return Err(Error::OutOfRange("point dimension mismatch".into()));
        }
        let s: f64 = xi[1..].iter().map(|x| x * x).sum();
        let ok = xi[0] > 0.0
            && match self.kind {
                BarrierKind::EdgeBarrier => xi[0] < self.c && s < self.c,
                BarrierKind::LinearCapBarrier => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfRange(format!(
                "barrier evaluated outside its domain at {xi:?}"
            )))
        }
    }
}

/// Closed-form barrier data at one point.
#[derive(Clone, Debug, Serialize)]
pub struct BarrierEval {
    pub value: f64,
    pub hessian: Vec<f64>,
    pub det: f64,
    /// Entries in the rotated frame (xi_1, r, 0, ..., 0).
    pub v11: f64,
    pub v12: f64,
    pub v22: f64,
    pub v_tangential: f64,
    /// v11 v22 - v12^2 (edge barrier), with the closed-form expansion.
    pub a_minus_b: f64,
    pub a_minus_b_expanded: f64,
}

/// Assembles the Hessian in original coordinates from rotated-frame entries:
/// e_1 is fixed, rho = xi'/|xi'| is the radial direction and the rest of
/// the xi' block is tangential.
fn assemble(n: usize, xi: &[f64], v11: f64, v12: f64, v22: f64, vt: f64) -> Vec<f64> {
    let r: f64 = xi[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut rho = vec![0.0; n];
    if n > 1 {
        if r > 0.0 {
            for j in 1..n {
                rho[j] = xi[j] / r;
            }
        } else {
            rho[1] = 1.0;
        }
    }
    let mut h = vec![0.0; n * n];
    h[0] = v11;
    for i in 1..n {
        h[i] = v12 * rho[i];
        h[i * n] = v12 * rho[i];
        for j in 1..n {
            let proj = if i == j { 1.0 } else { 0.0 };
            h[i * n + j] = vt * (proj - rho[i] * rho[j]) + v22 * rho[i] * rho[j];
        }
    }
    h
}

pub fn barrier_eval(b: &BarrierSpec, xi: &[f64]) -> Result<BarrierEval> {
    let value = b.value(xi)?;
    let n = b.dim;
    let x1 = xi[0];
    let s: f64 = xi[1..].iter().map(|x| x * x).sum();
    let x2 = s.sqrt();
    let (al, be, c) = (b.alpha, b.beta, b.c);
    match b.kind {
        BarrierKind::EdgeBarrier => {
            let v = value;
            let q = al / x1 - be / (c - x1);
            let v11 = -v * (-q * q + al / (x1 * x1) + be / (c - x1).powi(2));
            let v12 = -v * q * 2.0 * be * x2 / (c - s);
            let v22 = -v * (2.0 * be * (c + s) / (c - s).powi(2) - 4.0 * be * be * s / (c - s).powi(2));
            let vt = -v * 2.0 * be / (c - s);
            let (amb, amb_x, det) = if n == 1 {
                (v11, v11, v11)
            } else {
                let amb = v11 * v22 - v12 * v12;
                let bracket = al * (c - x1).powi(2) * ((1.0 - al) * c + (1.0 - 2.0 * be - al) * s)
                    + be * x1 * x1 * ((1.0 - be) * c + (1.0 - 3.0 * be) * s)
                    + 2.0 * al * be * x1 * (c - x1) * (c + s);
                let amb_x = 2.0 * be * v * v / (x1 * x1 * (c - x1).powi(2) * (c - s).powi(2)) * bracket;
                (amb, amb_x, amb_x * vt.powi(n as i32 - 2))
            };
            let hessian = if n == 1 {
                vec![v11]
            } else {
                assemble(n, xi, v11, v12, v22, vt)
            };
            Ok(BarrierEval {
                value,
                hessian,
                det,
                v11,
                v12,
                v22,
                v_tangential: vt,
                a_minus_b: amb,
                a_minus_b_expanded: amb_x,
            })
        }
        BarrierKind::LinearCapBarrier => {
            let v11 = al * (al - 1.0) * x1.powf(al - 2.0) * (c + s);
            let v12 = 2.0 * al * x2 * x1.powf(al - 1.0);
            let vt = 2.0 * x1.powf(al);
            let det = 2f64.powi(n as i32 - 1)
                * (al * (al - 1.0) * (c + s) - 2.0 * al * al * s)
                * x1.powf(n as f64 * al - 2.0);
            let hessian = if n == 1 {
                vec![v11]
            } else {
                assemble(n, xi, v11, v12, vt, vt)
            };
            let amb = if n == 1 { v11 } else { v11 * vt - v12 * v12 };
            Ok(BarrierEval {
                value,
                hessian,
                det: if n == 1 { v11 } else { det },
                v11,
                v12,
                v22: vt,
                v_tangential: vt,
                a_minus_b: amb,
                a_minus_b_expanded: amb,
            })
        }
    }
}

/// Right-hand side of the lower bound A - B >= alpha beta v^2 C (2n-1) /
/// (2 n m xi_1^2 (C - |xi'|^2)^2).
pub fn edge_lower_bound(b: &BarrierSpec, xi: &[f64]) -> Result<f64> {
    let v = b.value(xi)?;
    let n = b.dim as f64;
    let s: f64 = xi[1..].iter().map(|x| x * x).sum();
    Ok(b.alpha * b.beta * v * v / (xi[0] * xi[0] * (b.c - s).powi(2)) * b.c * (2.0 * n - 1.0) / (2.0 * n * b.m()))
}

/// Hessian by central differences of the value, step `h`.
pub fn fd_hessian_of(b: &BarrierSpec, xi: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = b.dim;
    let f = |d: &[f64]| b.value(d);
    let mut out = vec![0.0; n * n];
    let f0 = f(xi)?;
    for i in 0..n {
        for j in i..n {
            let val = if i == j {
                let mut p = xi.to_vec();
                let mut m = xi.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p)? - 2.0 * f0 + f(&m)?) / (h * h)
            } else {
                let shift = |si: f64, sj: f64| {
                    let mut p = xi.to_vec();
                    p[i] += si * h;
                    p[j] += sj * h;
                    f(&p)
                };
                (shift(1.0, 1.0)? - shift(1.0, -1.0)? - shift(-1.0, 1.0)? + shift(-1.0, -1.0)?) / (4.0 * h * h)
            };
            out[i * n + j] = val;
            out[j * n + i] = val;
        }
    }
    Ok(out)
}

/// alpha_k = 2 (1 - (1 - 1/n)^k) for k = 1..=k_star + 1.
#[derive(Clone, Debug, Serialize)]
pub struct AlphaSchedule {
    pub n: usize,
    pub alphas: Vec<f64>,
    pub k_star: usize,
    /// max over k >= 2 of |alpha_k - 2/n - (1 - 1/n) alpha_{k-1}|.
    pub recurrence_error: f64,
}

/// alpha_k < 1 - 1/n, decided exactly as (n+1) n^(k-1) < 2 (n-1)^k.
fn below_threshold(n: usize, k: u32) -> bool {
    let n128 = n as u128;
    match (
        (n128 + 1).checked_mul(n128.checked_pow(k - 1).unwrap_or(u128::MAX)),
        (n128 - 1).checked_pow(k).and_then(|x| x.checked_mul(2)),
    ) {
        (Some(l), Some(r)) if l != u128::MAX => l < r,
        _ => {
            let nf = n as f64;
            2.0 * (1.0 - (1.0 - 1.0 / nf).powi(k as i32)) < 1.0 - 1.0 / nf
        }
    }
}

pub fn alpha_schedule(n: usize) -> Result<AlphaSchedule> {
    if n < 2 {
        return Err(Error::OutOfRange(format!("alpha schedule needs n >= 2, got {n}")));
    }
    if !below_threshold(n, 1) {
        return Err(Error::ScheduleDegenerate { n });
    }
    let nf = n as f64;
    let alpha = |k: u32| 2.0 * (1.0 - (1.0 - 1.0 / nf).powi(k as i32));
    let mut k = 1u32;
    while below_threshold(n, k + 1) {
        k += 1;
    }
    let alphas: Vec<f64> = (1..=k + 1).map(alpha).collect();
    let recurrence_error = alphas
        .windows(2)
        .map(|w| (w[1] - 2.0 / nf - (1.0 - 1.0 / nf) * w[0]).abs())
        .fold(0.0, f64::max);
    Ok(AlphaSchedule {
        n,
        alphas,
        k_star: k as usize,
        recurrence_error,
    })
}

/// Smallest Hessian eigenvalue, for convexity checks on samples.
pub fn min_eigenvalue(e: &BarrierEval, n: usize) -> f64 {
    linalg::min_eigenvalue(&e.hessian, n)
}
