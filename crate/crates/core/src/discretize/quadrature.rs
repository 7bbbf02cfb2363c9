//! Interior and boundary quadrature.

use rayon::prelude::*;

use super::grid::{Grid, GridFn};
use crate::polytope::{Containment, Polytope};

/// Collar width (in cells) refined by `singular_integral`.
pub const DEFAULT_COLLAR: f64 = 1.0;

/// Cell-centered midpoint rule for the integral of g*w over the domain.
pub fn interior_integral(g: &GridFn, w: &GridFn) -> f64 {
    let grid = g.grid();
    debug_assert!(grid.same_layout(w.grid()));
    let wt = grid.weights();
    (0..grid.len())
        .filter(|&i| wt[i] > 0.0)
        .map(|i| wt[i] * g.get(i) * w.get(i))
        .sum()
}

/// Midpoint rule for a pointwise integrand.
pub fn interior_integral_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64 + Sync) -> f64 {
    let wt = grid.weights();
    (0..grid.len())
        .into_par_iter()
        .filter(|&i| wt[i] > 0.0)
        .map(|i| wt[i] * f(&grid.node(i)))
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

/// Integral of `smooth(node) + singular(x)` where `singular` is an analytic
/// integrand with an integrable boundary blow-up. Cells within
/// (collar + 0.5) h of the boundary are resolved by sub-cell sampling of the
/// singular part; elsewhere the midpoint rule is used.
pub fn singular_integral(grid: &Grid, smooth: &[f64], singular: impl Fn(&[f64]) -> f64 + Sync, collar: f64) -> f64 {
    let poly = grid.polytope().expect("singular_integral needs a polytope-backed grid");
    let n = grid.dim();
    let h = grid.h();
    let wt = grid.weights();
    let reach = (collar + 0.5) * grid.h_max() * poly.max_normal_norm().max(1.0);
    let s: usize = match n {
        1 => 32,
        2 => 16,
        _ => 8,
    };
    let parts: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .filter(|&i| wt[i] > 0.0)
        .map(|i| {
            let x = grid.node(i);
            let base = wt[i] * smooth[i];
            let near = poly.facet_distances(&x).iter().any(|d| *d < reach);
            if !near {
                return base + wt[i] * singular(&x);
            }
            let total = s.pow(n as u32);
            let sub_vol: f64 = h.iter().product::<f64>() / total as f64;
            let mut acc = 0.0;
            let mut y = vec![0.0; n];
            for c in 0..total {
                let mut r = c;
                for k in 0..n {
                    let j = r % s;
                    r /= s;
                    y[k] = x[k] + ((j as f64 + 0.5) / s as f64 - 0.5) * h[k];
                }
                if poly.contains(&y, 0.0) == Containment::Interior {
                    acc += singular(&y);
                }
            }
            base + sub_vol * acc
        })
        .collect();
    parts.iter().sum()
}

/// Quadrature nodes on the boundary: point, weight (including sigma_scale)
/// and facet index.
#[derive(Clone, Debug)]
pub struct BoundaryQuadrature {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub facets: Vec<usize>,
}

impl BoundaryQuadrature {
    /// Subdivides each facet into pieces of size about `h`.
    pub fn new(poly: &Polytope, h: f64) -> Self {
        let mut q = BoundaryQuadrature {
            points: Vec::new(),
            weights: Vec::new(),
            facets: Vec::new(),
        };
        let verts = poly.vertices();
        for (k, facet) in poly.facets().iter().enumerate() {
            let ids = poly.facet_vertices(k);
            let fv: Vec<&Vec<f64>> = ids.iter().map(|&i| &verts[i]).collect();
            let scale = facet.sigma_scale;
            match poly.dim() {
                1 => {
                    q.push(fv[0].clone(), scale, k);
                }
                2 => {
                    let (a, b) = (fv[0], fv[1]);
                    let len = dist(a, b);
                    let m = ((len / h).ceil() as usize).max(1);
                    for j in 0..m {
                        let t = (j as f64 + 0.5) / m as f64;
                        let p = lerp(a, b, t);
                        q.push(p, scale * len / m as f64, k);
                    }
                }
                _ => {
                    let poly_pts = order_facet_polygon(&fv, &facet.normal);
                    let c0 = poly_pts[0].clone();
                    for w in 1..poly_pts.len() - 1 {
                        q.add_triangle(&c0, &poly_pts[w], &poly_pts[w + 1], h, scale, k);
                    }
                }
            }
        }
        q
    }

    fn push(&mut self, p: Vec<f64>, w: f64, k: usize) {
        self.points.push(p);
        self.weights.push(w);
        self.facets.push(k);
    }

    /// Uniform s x s subdivision of a triangle, centroid rule per piece.
    fn add_triangle(&mut self, a: &[f64], b: &[f64], c: &[f64], h: f64, scale: f64, k: usize) {
        let longest = dist(a, b).max(dist(b, c)).max(dist(a, c));
        let s = ((longest / h).ceil() as usize).max(1);
        let e1: Vec<f64> = b.iter().zip(a).map(|(x, y)| (x - y) / s as f64).collect();
        let e2: Vec<f64> = c.iter().zip(a).map(|(x, y)| (x - y) / s as f64).collect();
        let area = 0.5 * cross_norm(&e1, &e2);
        let at = |i: f64, j: f64| -> Vec<f64> { (0..a.len()).map(|d| a[d] + i * e1[d] + j * e2[d]).collect() };
        for i in 0..s {
            for j in 0..(s - i) {
                let (fi, fj) = (i as f64, j as f64);
                self.push(at(fi + 1.0 / 3.0, fj + 1.0 / 3.0), scale * area, k);
                if i + j + 1 < s {
                    self.push(at(fi + 2.0 / 3.0, fj + 2.0 / 3.0), scale * area, k);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * f(p)).sum()
    }

    /// Total measure of each facet.
    pub fn facet_measures(&self, count: usize) -> Vec<f64> {
        let mut m = vec![0.0; count];
        for (k, w) in self.facets.iter().zip(&self.weights) {
            m[*k] += w;
        }
        m
    }
}

/// Integral of g*w over the boundary with respect to the facet measure.
pub fn boundary_integral(poly: &Polytope, h: f64, g: impl Fn(&[f64]) -> f64, w: impl Fn(&[f64]) -> f64) -> f64 {
    BoundaryQuadrature::new(poly, h).integrate(|x| g(x) * w(x))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

fn cross_norm(u: &[f64], v: &[f64]) -> f64 {
    // |u x v| via the Gram determinant, valid in any dimension.
    let uu: f64 = u.iter().map(|x| x * x).sum();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let uv: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
    (uu * vv - uv * uv).max(0.0).sqrt()
}

/// Orders the vertices of a planar convex polygon in 3-space by angle
/// around their centroid.
fn order_facet_polygon(pts: &[&Vec<f64>], normal: &[f64]) -> Vec<Vec<f64>> {
    let m = pts.len() as f64;
    let c: Vec<f64> = (0..3).map(|d| pts.iter().map(|p| p[d]).sum::<f64>() / m).collect();
    let nn = dist(normal, &[0.0, 0.0, 0.0]);
    let nrm: Vec<f64> = normal.iter().map(|x| x / nn).collect();
    let far = pts
        .iter()
        .map(|p| p.iter().zip(&c).map(|(x, y)| x - y).collect::<Vec<f64>>())
        .max_by(|a, b| dist(a, &[0.0; 3]).total_cmp(&dist(b, &[0.0; 3])))
        .unwrap();
    let fl = dist(&far, &[0.0; 3]);
    let e1: Vec<f64> = far.iter().map(|x| x / fl).collect();
    let e2 = vec![
        nrm[1] * e1[2] - nrm[2] * e1[1],
        nrm[2] * e1[0] - nrm[0] * e1[2],
        nrm[0] * e1[1] - nrm[1] * e1[0],
    ];
    let mut keyed: Vec<(f64, Vec<f64>)> = pts
        .iter()
        .map(|p| {
            let d: Vec<f64> = p.iter().zip(&c).map(|(x, y)| x - y).collect();
            let x: f64 = d.iter().zip(&e1).map(|(a, b)| a * b).sum();
            let y: f64 = d.iter().zip(&e2).map(|(a, b)| a * b).sum();
            (y.atan2(x), (*p).clone())
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, p)| p).collect()
}
