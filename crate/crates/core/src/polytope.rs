//! Bounded open polytopes given by facet inequalities `<a_k, xi> - c_k > 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

const VERTEX_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    pub normal: Vec<f64>,
    pub offset: f64,
    /// Weight of the boundary measure on this facet relative to Euclidean
    /// surface measure. Defaults to `1 / |normal|`.
    pub sigma_scale: f64,
}

impl Facet {
    pub fn new(normal: Vec<f64>, offset: f64) -> Self {
        let sigma_scale = 1.0 / linalg::norm(&normal);
        Facet {
            normal,
            offset,
            sigma_scale,
        }
    }

    /// delta_k(xi) = <a_k, xi> - c_k.
    #[inline]
    pub fn distance(&self, xi: &[f64]) -> f64 {
        linalg::dot(&self.normal, xi) - self.offset
    }

    pub fn normal_norm(&self) -> f64 {
        linalg::norm(&self.normal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Containment {
    Interior,
    Boundary,
    Outside,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Polytope {
    dim: usize,
    facets: Vec<Facet>,
    vertices: Vec<Vec<f64>>,
}

impl Polytope {
    /// Build from facet data. Vertices are enumerated from facet
    /// intersections when `vertices` is `None`.
    pub fn new(facets: Vec<Facet>, vertices: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let dim = facets
            .first()
            .map(|f| f.normal.len())
            .ok_or_else(|| Error::InvalidPolytope("no facets".into()))?;
        if dim == 0 {
            return Err(Error::InvalidPolytope("dimension must be >= 1".into()));
        }
        for (k, f) in facets.iter().enumerate() {
            if f.normal.len() != dim {
                return Err(Error::InvalidPolytope(format!(
                    "facet {k} has normal of length {} (expected {dim})",
                    f.normal.len()
                )));
            }
            if !(f.normal_norm() > 0.0) || !f.offset.is_finite() {
                return Err(Error::InvalidPolytope(format!("facet {k} is degenerate")));
            }
            if !(f.sigma_scale > 0.0) {
                return Err(Error::InvalidPolytope(format!(
                    "facet {k} has non-positive sigma_scale"
                )));
            }
        }
        if !positively_spanning(&facets, dim) {
            return Err(Error::InvalidPolytope(
                "facet normals do not bound the region (unbounded polyhedron)".into(),
            ));
        }
        let computed = vertices.is_none();
        let vertices = match vertices {
            Some(v) => v,
            None => enumerate_vertices(&facets, dim),
        };
        let p = Polytope { dim, facets, vertices };
        p.validate(computed)?;
        Ok(p)
    }

    /// Rows `[a_1, ..., a_n, c]`, the configuration layout.
    pub fn from_rows(rows: &[Vec<f64>], vertices: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let facets = rows
            .iter()
            .map(|r| {
                if r.len() < 2 {
                    return Err(Error::InvalidPolytope(format!("facet row {r:?} too short")));
                }
                let (a, c) = r.split_at(r.len() - 1);
                Ok(Facet::new(a.to_vec(), c[0]))
            })
            .collect::<Result<Vec<_>>>()?;
        Polytope::new(facets, vertices)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.facets
            .iter()
            .map(|f| {
                let mut r = f.normal.clone();
                r.push(f.offset);
                r
            })
            .collect()
    }

    /// The open interval (a, b), facets ordered left then right.
    pub fn interval(a: f64, b: f64) -> Self {
        Polytope::new(vec![Facet::new(vec![1.0], a), Facet::new(vec![-1.0], -b)], None).expect("interval")
    }

    /// Axis-aligned box; facets ordered (lo_0, hi_0, lo_1, hi_1, ...).
    pub fn cuboid(lo: &[f64], hi: &[f64]) -> Self {
        let n = lo.len();
        let mut facets = Vec::with_capacity(2 * n);
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            facets.push(Facet::new(e.clone(), lo[i]));
            e[i] = -1.0;
            facets.push(Facet::new(e, -hi[i]));
        }
        Polytope::new(facets, None).expect("cuboid")
    }

    pub fn unit_cube(n: usize) -> Self {
        Polytope::cuboid(&vec![0.0; n], &vec![1.0; n])
    }

    pub fn unit_square() -> Self {
        Polytope::unit_cube(2)
    }

    /// Standard simplex {xi_i > 0, sum xi_i < 1}.
    pub fn simplex(n: usize) -> Self {
        let mut facets = Vec::with_capacity(n + 1);
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            facets.push(Facet::new(e, 0.0));
        }
        facets.push(Facet::new(vec![-1.0; n], -1.0));
        Polytope::new(facets, None).expect("simplex")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    pub fn with_sigma_scales(mut self, scales: &[f64]) -> Result<Self> {
        if scales.len() != self.facets.len() {
            return Err(Error::InvalidPolytope("sigma_scale length mismatch".into()));
        }
        for (f, s) in self.facets.iter_mut().zip(scales) {
            if !(*s > 0.0) {
                return Err(Error::InvalidPolytope("sigma_scale must be positive".into()));
            }
            f.sigma_scale = *s;
        }
        Ok(self)
    }

    /// delta_k(xi) for every facet, in facet order.
    pub fn facet_distances(&self, xi: &[f64]) -> Vec<f64> {
        self.facets.iter().map(|f| f.distance(xi)).collect()
    }

    pub fn min_facet_distance(&self, xi: &[f64]) -> (usize, f64) {
        self.facets
            .iter()
            .enumerate()
            .map(|(k, f)| (k, f.distance(xi)))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
    }

    /// Euclidean distance to the boundary, min_k delta_k / |a_k|.
    pub fn euclidean_boundary_distance(&self, xi: &[f64]) -> Result<f64> {
        let mut best = f64::INFINITY;
        for (k, f) in self.facets.iter().enumerate() {
            let d = f.distance(xi);
            if d < -1e-12 {
                return Err(Error::PointOutside {
                    point: xi.to_vec(),
                    facet: k,
                    distance: d,
                });
            }
            best = best.min(d / f.normal_norm());
        }
        Ok(best.max(0.0))
    }

    pub fn contains(&self, xi: &[f64], tol: f64) -> Containment {
        let (_, m) = self.min_facet_distance(xi);
        if m > tol {
            Containment::Interior
        } else if m >= -tol {
            Containment::Boundary
        } else {
            Containment::Outside
        }
    }

    /// Errors with `PointOutside` unless every delta_k is strictly positive.
    pub fn require_interior(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let d = self.facet_distances(xi);
        for (k, &dk) in d.iter().enumerate() {
            if !(dk > 0.0) {
                return Err(Error::PointOutside {
                    point: xi.to_vec(),
                    facet: k,
                    distance: dk,
                });
            }
        }
        Ok(d)
    }

    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for v in &self.vertices {
            for i in 0..self.dim {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        (lo, hi)
    }

    pub fn vertex_centroid(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        for v in &self.vertices {
            for i in 0..self.dim {
                c[i] += v[i];
            }
        }
        let k = self.vertices.len() as f64;
        c.iter_mut().for_each(|x| *x /= k);
        c
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for a in &self.vertices {
            for b in &self.vertices {
                let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                d = d.max(s.sqrt());
            }
        }
        d
    }

    pub fn max_normal_norm(&self) -> f64 {
        self.facets.iter().map(Facet::normal_norm).fold(0.0, f64::max)
    }

    /// Indices of the vertices lying on facet `k`.
    pub fn facet_vertices(&self, k: usize) -> Vec<usize> {
        let f = &self.facets[k];
        let scale = 1.0 + f.offset.abs();
        self.vertices
            .iter()
            .enumerate()
            .filter(|(_, v)| f.distance(v).abs() <= 1e-9 * scale)
            .map(|(i, _)| i)
            .collect()
    }

    /// True when every facet normal is parallel to a coordinate axis.
    pub fn is_box_aligned(&self) -> bool {
        self.facets
            .iter()
            .all(|f| f.normal.iter().filter(|a| **a != 0.0).count() == 1)
    }

    fn validate(&self, computed_vertices: bool) -> Result<()> {
        if self.vertices.len() < self.dim + 1 {
            return Err(Error::InvalidPolytope(format!(
                "only {} vertices found; polytope is empty or degenerate",
                self.vertices.len()
            )));
        }
        for v in &self.vertices {
            if v.len() != self.dim {
                return Err(Error::InvalidPolytope("vertex dimension mismatch".into()));
            }
        }
        let c = self.vertex_centroid();
        if self.facet_distances(&c).iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidPolytope("interior is empty".into()));
        }
        // every facet must support the closed polytope
        for (k, f) in self.facets.iter().enumerate() {
            let scale = 1.0 + f.offset.abs();
            let m = self
                .vertices
                .iter()
                .map(|v| f.distance(v))
                .fold(f64::INFINITY, f64::min);
            if m.abs() > 1e-9 * scale {
                return Err(Error::InvalidPolytope(format!(
                    "facet {k} is not supporting (min distance over vertices {m:e})"
                )));
            }
            if self.facet_vertices(k).len() < self.dim {
                return Err(Error::InvalidPolytope(format!(
                    "facet {k} touches fewer than {} vertices",
                    self.dim
                )));
            }
        }
        let tol = if computed_vertices { VERTEX_TOL } else { 1e-12 };
        for (i, v) in self.vertices.iter().enumerate() {
            let on = self
                .facets
                .iter()
                .filter(|f| f.distance(v).abs() <= tol * (1.0 + f.offset.abs()))
                .count();
            let outside = self
                .facets
                .iter()
                .any(|f| f.distance(v) < -tol * (1.0 + f.offset.abs()));
            if on < self.dim || outside {
                return Err(Error::InvalidPolytope(format!(
                    "vertex {i} {v:?} is not an intersection of {} facets",
                    self.dim
                )));
            }
        }
        Ok(())
    }
}

fn enumerate_vertices(facets: &[Facet], dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut combo = Vec::with_capacity(dim);
    combinations(facets.len(), dim, 0, &mut combo, &mut |idx| {
        let m: Vec<f64> = idx.iter().flat_map(|&k| facets[k].normal.clone()).collect();
        if linalg::det(&m, dim).abs() < 1e-14 {
            return;
        }
        let rhs: Vec<f64> = idx.iter().map(|&k| facets[k].offset).collect();
        let Some(x) = linalg::solve(&m, &rhs, dim) else {
            return;
        };
        let feasible = facets
            .iter()
            .all(|f| f.distance(&x) >= -VERTEX_TOL * (1.0 + f.offset.abs()));
        if !feasible {
            return;
        }
        let dup = out.iter().any(|v| {
            v.iter()
                .zip(&x)
                .all(|(a, b)| (a - b).abs() <= VERTEX_TOL * (1.0 + a.abs()))
        });
        if !dup {
            out.push(x);
        }
    });
    out
}

fn combinations(n: usize, k: usize, start: usize, current: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    if current.len() == k {
        visit(current);
        return;
    }
    for i in start..n {
        current.push(i);
        combinations(n, k, i + 1, current, visit);
        current.pop();
    }
}

/// Checks that no nonzero direction d has <a_k, d> >= 0 for all k, by probing
/// a dense set of unit directions (dimensions here are small).
fn positively_spanning(facets: &[Facet], dim: usize) -> bool {
    let dirs: Vec<Vec<f64>> = match dim {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..720)
            .map(|i| {
                let t = i as f64 * std::f64::consts::PI / 360.0;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        _ => {
            // Fibonacci-type points on the sphere in the first three axes,
            // plus signed coordinate axes for higher dimensions.
            let m = 4000;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let mut v: Vec<Vec<f64>> = (0..m)
                .map(|i| {
                    let y = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
                    let r = (1.0 - y * y).sqrt();
                    let t = golden * i as f64;
                    let mut d = vec![0.0; dim];
                    d[0] = r * t.cos();
                    d[1] = y;
                    d[2] = r * t.sin();
                    d
                })
                .collect();
            for i in 0..dim {
                for s in [1.0, -1.0] {
                    let mut d = vec![0.0; dim];
                    d[i] = s;
                    v.push(d);
                }
            }
            v
        }
    };
    dirs.iter().all(|d| {
        facets
            .iter()
            .any(|f| linalg::dot(&f.normal, d) < -1e-9 * f.normal_norm())
    })
}
