//! Normal map and numerical Legendre transform.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::discretize::{Grid, GridFn};
use crate::error::{Error, Result};
use crate::linalg;
use crate::potentials::SPotential;

/// A convex function known on a finite sample, with an off-sample
/// evaluator for polishing.
pub trait ConvexSampler: Sync {
    fn dim(&self) -> usize;
    /// (point, value, on the boundary of the sample region).
    fn samples(&self) -> Vec<(Vec<f64>, f64, bool)>;
    /// Value at an arbitrary point; `None` outside the sample region.
    fn value_at(&self, x: &[f64]) -> Option<f64>;
    fn gradient_at(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
    fn hessian_at(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
    /// Typical sample spacing per axis.
    fn spacing(&self) -> Vec<f64>;
}

/// An SPotential restricted to nodes with every delta_k >= margin.
pub struct PotentialSampler<'a> {
    pub u: &'a SPotential,
    pub margin: f64,
    /// Evaluate u(xi + shift) instead of u(xi); used to centre at p_o.
    pub shift: Vec<f64>,
    /// Use cubic instead of multilinear interpolation off the nodes.
    pub smooth: bool,
}

impl<'a> PotentialSampler<'a> {
    pub fn new(u: &'a SPotential, margin: f64) -> Self {
        PotentialSampler {
            u,
            margin,
            shift: vec![0.0; u.dim()],
            smooth: false,
        }
    }

    /// Sampler of xi -> u(xi + p_o).
    pub fn centered(u: &'a SPotential, margin: f64) -> Self {
        PotentialSampler {
            u,
            margin,
            shift: u.p_o().to_vec(),
            smooth: false,
        }
    }

    pub fn smooth(mut self) -> Self {
        self.smooth = true;
        self
    }

    fn inside(&self, x: &[f64]) -> bool {
        self.u
            .polytope()
            .facet_distances(x)
            .iter()
            .all(|d| *d >= self.margin && *d > 0.0)
    }

    fn member(&self, i: usize) -> bool {
        let g = self.u.grid();
        g.is_active(i) && self.inside(&g.node(i))
    }

    fn abs(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.shift).map(|(a, b)| a + b).collect()
    }
}

impl ConvexSampler for PotentialSampler<'_> {
    fn dim(&self) -> usize {
        self.u.dim()
    }

    fn samples(&self) -> Vec<(Vec<f64>, f64, bool)> {
        let g = self.u.grid();
        let n = g.dim();
        (0..g.len())
            .filter(|&i| self.member(i))
            .map(|i| {
                let edge = (0..n).any(|a| [-1, 1].iter().any(|&d| g.step(i, a, d).is_none_or(|j| !self.member(j))));
                let x: Vec<f64> = g.node(i).iter().zip(&self.shift).map(|(a, b)| a - b).collect();
                (x, self.u.node_value(i), edge)
            })
            .collect()
    }

    fn value_at(&self, x: &[f64]) -> Option<f64> {
        let y = self.abs(x);
        self.inside(&y).then(|| {
            if self.smooth {
                self.u.value_at_smooth(&y)
            } else {
                self.u.value_at(&y)
            }
        })
    }

    fn gradient_at(&self, x: &[f64]) -> Option<Vec<f64>> {
        let y = self.abs(x);
        if !self.inside(&y) {
            return None;
        }
        if self.smooth {
            self.u.gradient_at_smooth(&y).ok()
        } else {
            self.u.gradient_at(&y).ok()
        }
    }

    fn hessian_at(&self, x: &[f64]) -> Option<Vec<f64>> {
        let y = self.abs(x);
        if !self.inside(&y) {
            return None;
        }
        if self.smooth {
            self.u.hessian_at_smooth(&y).ok()
        } else {
            self.u.hessian_at(&y).ok()
        }
    }

    fn spacing(&self) -> Vec<f64> {
        self.u.grid().h().to_vec()
    }
}

/// A plain grid function treated as a convex sample (e.g. a computed dual).
pub struct GridSampler<'a> {
    pub g: &'a GridFn,
    /// Optional restriction of the sample to a node mask.
    pub mask: Option<&'a [bool]>,
}

impl GridSampler<'_> {
    fn member(&self, i: usize) -> bool {
        self.g.grid().is_active(i) && self.g.get(i).is_finite() && self.mask.is_none_or(|m| m[i])
    }
}

impl ConvexSampler for GridSampler<'_> {
    fn dim(&self) -> usize {
        self.g.grid().dim()
    }

    fn samples(&self) -> Vec<(Vec<f64>, f64, bool)> {
        let grid = self.g.grid();
        let n = grid.dim();
        (0..grid.len())
            .filter(|&i| self.member(i))
            .map(|i| {
                let edge = (0..n).any(|a| {
                    [-1, 1]
                        .iter()
                        .any(|&d| grid.step(i, a, d).is_none_or(|j| !self.member(j)))
                });
                (grid.node(i), self.g.get(i), edge)
            })
            .collect()
    }

    fn value_at(&self, x: &[f64]) -> Option<f64> {
        let grid = self.g.grid();
        // only inside the hull of member nodes
        let inside = (0..grid.dim()).all(|i| {
            let s = (x[i] - grid.lo()[i]) / grid.h()[i] - 0.5;
            s >= 0.0 && s <= (grid.shape()[i] - 1) as f64
        });
        if !inside {
            return None;
        }
        if let Some(m) = self.mask {
            let c = grid.nearest_active(x)?;
            if !m[c] {
                return None;
            }
        }
        self.g.try_interpolate(x)
    }

    fn spacing(&self) -> Vec<f64> {
        self.g.grid().h().to_vec()
    }
}

/// Gradient of u at every node with a stencil.
pub fn normal_map(u: &SPotential) -> Vec<Option<Vec<f64>>> {
    u.gradient_field()
}

/// Conjugate on a dual box grid.
#[derive(Clone, Debug)]
pub struct DualGridFn {
    pub f: GridFn,
    /// argmax xi(x) per dual node.
    pub gradient_map: Vec<Vec<f64>>,
    /// Dual nodes whose argmax sits on the boundary of the sample region.
    pub clipped: Vec<bool>,
}

impl DualGridFn {
    pub fn grid(&self) -> &Arc<Grid> {
        self.f.grid()
    }

    /// Dual values with clipped nodes masked out (NaN).
    pub fn unclipped(&self) -> GridFn {
        GridFn::new_partial(
            self.f.grid().clone(),
            self.f
                .values()
                .iter()
                .zip(&self.clipped)
                .map(|(v, c)| if *c { f64::NAN } else { *v })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConjugatePoint {
    pub value: f64,
    pub argmax: Vec<f64>,
    pub clipped: bool,
}

fn golden(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
        if (b - a).abs() < 1e-13 {
            break;
        }
    }
    if fc > fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// f(x) = max over the sample of <x, xi> - u(xi), then polished: Newton on
/// grad u(xi) = x when derivatives are available, otherwise golden-section
/// sweeps along each axis.
pub fn conjugate_point(s: &dyn ConvexSampler, samples: &[(Vec<f64>, f64, bool)], x: &[f64]) -> Option<ConjugatePoint> {
    let n = s.dim();
    let obj = |xi: &[f64], u: f64| linalg::dot(x, xi) - u;
    let (best, _) = samples
        .iter()
        .enumerate()
        .map(|(i, (xi, u, _))| (i, obj(xi, *u)))
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    let (xi0, u0, clipped) = &samples[best];
    let mut xi = xi0.clone();
    let mut val = obj(xi0, *u0);
    if let Some(v) = s.value_at(&xi) {
        val = obj(&xi, v);
    }
    let h = s.spacing();
    let mut newton_ok = false;
    if let (Some(_), Some(_)) = (s.gradient_at(&xi), s.hessian_at(&xi)) {
        let mut y = xi.clone();
        for _ in 0..30 {
            let (Some(g), Some(hs)) = (s.gradient_at(&y), s.hessian_at(&y)) else {
                break;
            };
            let r: Vec<f64> = g.iter().zip(x).map(|(a, b)| a - b).collect();
            if linalg::norm(&r) < 1e-13 * (1.0 + linalg::norm(x)) {
                newton_ok = true;
                break;
            }
            let Some(step) = linalg::solve(&hs, &r, n) else { break };
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-6 {
                let z: Vec<f64> = y.iter().zip(&step).map(|(a, b)| a - t * b).collect();
                // stay within two cells of the sample argmax region
                let near = z.iter().zip(xi0).zip(&h).all(|((a, b), hh)| (a - b).abs() <= 2.0 * hh);
                if near && s.value_at(&z).is_some() {
                    y = z;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if newton_ok {
            if let Some(v) = s.value_at(&y) {
                let cand = obj(&y, v);
                if cand >= val - 1e-12 * (1.0 + val.abs()) {
                    xi = y;
                    val = cand;
                } else {
                    newton_ok = false;
                }
            }
        }
    }
    if !newton_ok {
        for _ in 0..3 {
            for a in 0..n {
                let base = xi.clone();
                let line = |t: f64| {
                    let mut z = base.clone();
                    z[a] = t;
                    s.value_at(&z).map_or(f64::NEG_INFINITY, |v| obj(&z, v))
                };
                let (t, v) = golden(base[a] - h[a], base[a] + h[a], line);
                if v > val {
                    xi[a] = t;
                    val = v;
                }
            }
        }
    }
    Some(ConjugatePoint {
        value: val,
        argmax: xi,
        clipped: *clipped,
    })
}

/// Box covering the gradient image of the non-edge samples, inflated by
/// 10% per side. Edge samples own unbounded normal cones, so their
/// gradients would only stretch the box into clipped territory.
pub fn default_dual_box(s: &dyn ConvexSampler) -> (Vec<f64>, Vec<f64>) {
    let n = s.dim();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let samples = s.samples();
    let any_inner = samples.iter().any(|p| !p.2);
    for (xi, _, edge) in &samples {
        if *edge && any_inner {
            continue;
        }
        if let Some(g) = s.gradient_at(xi) {
            for i in 0..n {
                lo[i] = lo[i].min(g[i]);
                hi[i] = hi[i].max(g[i]);
            }
        }
    }
    if lo[0].is_infinite() {
        // no derivatives: difference quotients of the sample
        let pts = s.samples();
        for (a, (xa, ua, _)) in pts.iter().enumerate() {
            for (xb, ub, _) in pts.iter().skip(a + 1).take(4 * n) {
                for i in 0..n {
                    let dx = xb[i] - xa[i];
                    if dx.abs() > 1e-14 {
                        let q = (ub - ua) / dx;
                        lo[i] = lo[i].min(q);
                        hi[i] = hi[i].max(q);
                    }
                }
            }
        }
    }
    for i in 0..n {
        let w = (hi[i] - lo[i]).max(1e-6);
        lo[i] -= 0.1 * w;
        hi[i] += 0.1 * w;
    }
    (lo, hi)
}

/// Conjugate on a dual box with `shape` nodes per axis. Errors with
/// DualBoxTooSmall when a node inside the sampled gradient image and more
/// than 10% of the box width inside every face has its argmax on the
/// sample boundary.
pub fn legendre_transform(s: &dyn ConvexSampler, lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>) -> Result<DualGridFn> {
    let grid = Arc::new(Grid::on_box(lo.clone(), hi.clone(), shape)?);
    let samples = s.samples();
    if samples.is_empty() {
        return Err(Error::DualUnavailable("empty sample region".into()));
    }
    let pts: Vec<Option<ConjugatePoint>> = (0..grid.len())
        .into_par_iter()
        .map(|i| conjugate_point(s, &samples, &grid.node(i)))
        .collect();
    let mut values = Vec::with_capacity(grid.len());
    let mut map = Vec::with_capacity(grid.len());
    let mut clipped = Vec::with_capacity(grid.len());
    for p in pts {
        let p = p.ok_or_else(|| Error::DualUnavailable("no conjugate value".into()))?;
        values.push(p.value);
        map.push(p.argmax);
        clipped.push(p.clipped);
    }
    let covered = covered_nodes(s, &samples, &grid);
    let deep = (0..grid.len())
        .filter(|&i| {
            clipped[i] && covered.as_ref().is_none_or(|c| c[i]) && {
                let x = grid.node(i);
                (0..x.len()).all(|a| {
                    let w = hi[a] - lo[a];
                    x[a] - lo[a] > 0.1 * w && hi[a] - x[a] > 0.1 * w
                })
            }
        })
        .count();
    if deep > 0 {
        return Err(Error::DualBoxTooSmall { count: deep });
    }
    Ok(DualGridFn {
        f: GridFn::new(grid, values)?,
        gradient_map: map,
        clipped,
    })
}

/// Nearest dual node to a point, if it lies inside the dual node array.
fn nearest_dual_node(grid: &Grid, x: &[f64]) -> Option<usize> {
    let n = grid.dim();
    let mut m = Vec::with_capacity(n);
    for a in 0..n {
        let t = ((x[a] - grid.lo()[a]) / grid.h()[a] - 0.5).round();
        if t < 0.0 || t > (grid.shape()[a] - 1) as f64 {
            return None;
        }
        m.push(t as usize);
    }
    Some(grid.linear_index(&m))
}

/// Marks plus their neighbours in the sup norm.
fn dilate(grid: &Grid, marks: &[bool]) -> Vec<bool> {
    let n = grid.dim();
    let mut out = marks.to_vec();
    for (i, _) in marks.iter().enumerate().filter(|(_, m)| **m) {
        let base = grid.multi_index(i);
        'stencil: for c in 0..3usize.pow(n as u32) {
            let mut m = base.clone();
            let mut r = c;
            for (a, mi) in m.iter_mut().enumerate() {
                let v = *mi as i64 + (r % 3) as i64 - 1;
                r /= 3;
                if v < 0 || v >= grid.shape()[a] as i64 {
                    continue 'stencil;
                }
                *mi = v as usize;
            }
            out[grid.linear_index(&m)] = true;
        }
    }
    out
}

/// Dual nodes that stand for the interior of the sampled gradient image:
/// nearest to the gradient of a non-edge sample and not next to the
/// gradient of an edge sample. None when the sampler has no gradients.
fn covered_nodes(s: &dyn ConvexSampler, samples: &[(Vec<f64>, f64, bool)], grid: &Grid) -> Option<Vec<bool>> {
    let mut inner = vec![false; grid.len()];
    let mut edge = vec![false; grid.len()];
    for (xi, _, is_edge) in samples {
        let g = s.gradient_at(xi)?;
        if let Some(j) = nearest_dual_node(grid, &g) {
            if *is_edge {
                edge[j] = true;
            } else {
                inner[j] = true;
            }
        }
    }
    let near_edge = dilate(grid, &edge);
    let out: Vec<bool> = inner.iter().zip(&near_edge).map(|(a, b)| *a && !*b).collect();
    out.iter().any(|c| *c).then_some(out)
}

/// Legendre transform on the default dual box.
pub fn legendre_default(s: &dyn ConvexSampler, shape: Vec<usize>) -> Result<DualGridFn> {
    let (lo, hi) = default_dual_box(s);
    legendre_transform(s, lo, hi, shape)
}

#[derive(Clone, Debug, Serialize)]
pub struct DualityCheck {
    /// max |u(xi) + f(grad u(xi)) - <grad u(xi), xi>| over checked nodes.
    pub young: f64,
    /// max |f^* - u| over checked nodes (double transform).
    pub involution: f64,
    /// max |f_ij(grad u) u_jk - delta_ik|.
    pub hessian: f64,
    /// max |det f_ij(grad u) det u_ij - 1|.
    pub det: f64,
    pub checked: usize,
}

/// Young, involution and Hessian/det duality on nodes with every delta_k
/// >= margin, using a dual of `dual_shape` on the default box.
pub fn duality_check(u: &SPotential, margin: f64, dual_shape: Vec<usize>) -> Result<DualityCheck> {
    let sampler = PotentialSampler::new(u, 0.0);
    let dual = legendre_default(&sampler, dual_shape)?;
    let g = u.grid();
    let n = g.dim();
    let nodes: Vec<usize> = (0..g.len())
        .filter(|&i| g.is_active(i) && u.polytope().facet_distances(&g.node(i)).iter().all(|d| *d >= margin))
        .collect();
    let fvals = dual.unclipped();
    let mut young: f64 = 0.0;
    let mut checked = 0;
    for &i in &nodes {
        let xi = g.node(i);
        let Some(x) = u.node_gradient(i) else { continue };
        let Some(f) = fvals.try_interpolate(&x) else { continue };
        young = young.max((u.node_value(i) + f - linalg::dot(&x, &xi)).abs());
        checked += 1;
    }
    // Hessian duality at dual nodes, comparing with u at their argmax
    let mut hess: f64 = 0.0;
    let mut det: f64 = 0.0;
    if let Ok(op) = crate::discretize::FdOperator::new(dual.grid().clone()) {
        let id = linalg::identity(n);
        for j in 0..dual.grid().len() {
            let xj = &dual.gradient_map[j];
            if dual.clipped[j] || u.polytope().facet_distances(xj).iter().any(|d| *d < margin) {
                continue;
            }
            let Some(hf) = op.hessian_at(j, fvals.values()) else {
                continue;
            };
            if !hf.iter().all(|v| v.is_finite()) {
                continue;
            }
            let Ok(hu) = u.hessian_at(xj) else { continue };
            let p = linalg::matmul(&hf, &hu, n);
            hess = hess.max(p.iter().zip(&id).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            det = det.max((linalg::det(&hf, n) * linalg::det(&hu, n) - 1.0).abs());
        }
    }
    // involution: transform the dual back onto the primal nodes
    let back = GridSampler { g: &fvals, mask: None };
    let bsamples = back.samples();
    let mut invol: f64 = 0.0;
    for &i in &nodes {
        let xi = g.node(i);
        if let Some(p) = conjugate_point(&back, &bsamples, &xi) {
            if !p.clipped {
                invol = invol.max((p.value - u.node_value(i)).abs());
            }
        }
    }
    Ok(DualityCheck {
        young,
        involution: invol,
        hessian: hess,
        det,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Polynomial;
    use crate::polytope::Polytope;

    #[test]
    fn guillemin_normal_map_and_f0() {
        let u = SPotential::guillemin(Arc::new(Polytope::interval(0.0, 1.0)), 1.0 / 256.0, vec![0.5]).unwrap();
        let g = u.gradient_at(&[0.75]).unwrap();
        assert!((g[0] - 3f64.ln()).abs() < 1e-12);
        assert!(u.gradient_at(&[0.5]).unwrap()[0].abs() < 1e-14);
        let s = PotentialSampler::new(&u, 0.0);
        let samples = s.samples();
        let p = conjugate_point(&s, &samples, &[0.0]).unwrap();
        assert!((p.value - 2f64.ln()).abs() < 1e-10, "{}", p.value);
        assert!((p.argmax[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn self_dual_quadratic() {
        let p = Arc::new(Polytope::interval(-2.0, 2.0));
        let grid = Arc::new(Grid::new(p, 1.0 / 64.0).unwrap());
        let q = Arc::new(Polynomial::new(vec![(0.5, vec![2])]));
        let u = SPotential::analytic(grid, q, vec![0.0], false).unwrap();
        let s = PotentialSampler::new(&u, 0.0);
        let d = legendre_transform(&s, vec![-1.0], vec![1.0], vec![41]).unwrap();
        for i in 0..d.grid().len() {
            let x = d.grid().node(i)[0];
            assert!((d.f.get(i) - 0.5 * x * x).abs() < 1e-10);
        }
    }

    #[test]
    fn translation_rule() {
        let p = Arc::new(Polytope::unit_square());
        let grid = Arc::new(Grid::new(p, 1.0 / 32.0).unwrap());
        let q = Arc::new(Polynomial::new(vec![
            (0.5, vec![2, 0]),
            (0.5, vec![0, 2]),
            (0.3, vec![1, 0]),
            (-0.2, vec![0, 1]),
        ]));
        let u = SPotential::analytic(grid.clone(), q, vec![0.5, 0.5], false).unwrap();
        let s = PotentialSampler::new(&u, 0.0);
        let samples = s.samples();
        for x in [[0.8, 0.5], [0.6, 0.1]] {
            let p = conjugate_point(&s, &samples, &x).unwrap();
            let e = 0.5 * ((x[0] - 0.3).powi(2) + (x[1] + 0.2).powi(2));
            assert!((p.value - e).abs() < 1e-10);
        }
    }
}
