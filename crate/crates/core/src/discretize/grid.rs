use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polytope::{Containment, Polytope};

/// Node classification. `Band` nodes are inside the domain but within one
/// stencil width of its boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Interior,
    Band,
    Outside,
}

impl NodeKind {
    pub fn is_active(self) -> bool {
        self != NodeKind::Outside
    }
}

/// Nodes closer than this fraction of the smallest spacing to the boundary
/// are classified `Outside`.
pub const MASK_TOL_FRACTION: f64 = 0.05;

/// Cell-centered tensor grid over an axis-aligned box.
#[derive(Clone, Debug)]
pub struct Grid {
    dim: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    h: Vec<f64>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    kinds: Vec<NodeKind>,
    weights: Vec<f64>,
    polytope: Option<Arc<Polytope>>,
}

impl Grid {
    /// Grid over the bounding box of `poly` with spacing close to `h`
    /// (adjusted per axis so the box is tiled exactly).
    pub fn new(poly: Arc<Polytope>, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::OutOfRange(format!("grid spacing must be positive, got {h}")));
        }
        let (lo, hi) = poly.bounding_box();
        let shape: Vec<usize> = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| (((b - a) / h).round() as usize).max(1))
            .collect();
        Grid::with_shape(poly, &shape)
    }

    pub fn with_shape(poly: Arc<Polytope>, shape: &[usize]) -> Result<Self> {
        let (lo, hi) = poly.bounding_box();
        let mut g = Grid::skeleton(lo, hi, shape.to_vec())?;
        let hmin = g.h.iter().cloned().fold(f64::INFINITY, f64::min);
        let tol = MASK_TOL_FRACTION * hmin;
        let total = g.len();
        let mut inside = vec![false; total];
        for idx in 0..total {
            let x = g.node(idx);
            inside[idx] = match poly.euclidean_boundary_distance(&x) {
                Ok(d) => d > tol,
                Err(_) => false,
            };
        }
        g.kinds = g.classify(&inside);
        let cell_vol: f64 = g.h.iter().product();
        g.weights = (0..total)
            .map(|idx| {
                if !inside[idx] {
                    0.0
                } else {
                    cell_vol * cell_fraction(&poly, &g.node(idx), &g.h)
                }
            })
            .collect();
        g.polytope = Some(poly);
        Ok(g)
    }

    /// Plain box grid (no polytope); the outer node layer is `Band`.
    pub fn on_box(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let mut g = Grid::skeleton(lo, hi, shape)?;
        let inside = vec![true; g.len()];
        g.kinds = g.classify(&inside);
        let cell_vol: f64 = g.h.iter().product();
        g.weights = vec![cell_vol; g.len()];
        Ok(g)
    }

    /// Box grid whose active set is `inside`; Interior/Band classification
    /// follows the usual 3^n neighbourhood rule.
    pub fn on_box_with_mask(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>, inside: &[bool]) -> Result<Self> {
        let mut g = Grid::skeleton(lo, hi, shape)?;
        if inside.len() != g.len() {
            return Err(Error::OutOfRange("mask length does not match grid shape".into()));
        }
        g.kinds = g.classify(inside);
        let cell_vol: f64 = g.h.iter().product();
        g.weights = inside.iter().map(|&b| if b { cell_vol } else { 0.0 }).collect();
        Ok(g)
    }

    /// Box grid with an explicit mask (used when loading dumps).
    pub fn on_box_with_kinds(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>, kinds: Vec<NodeKind>) -> Result<Self> {
        let mut g = Grid::skeleton(lo, hi, shape)?;
        if kinds.len() != g.len() {
            return Err(Error::config("mask", "mask length does not match grid shape"));
        }
        let cell_vol: f64 = g.h.iter().product();
        g.weights = kinds
            .iter()
            .map(|k| if k.is_active() { cell_vol } else { 0.0 })
            .collect();
        g.kinds = kinds;
        Ok(g)
    }

    fn skeleton(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let dim = lo.len();
        if dim == 0 || hi.len() != dim || shape.len() != dim {
            return Err(Error::OutOfRange("grid box dimensions mismatch".into()));
        }
        if shape.contains(&0) {
            return Err(Error::OutOfRange("grid shape must be positive".into()));
        }
        let h: Vec<f64> = (0..dim).map(|i| (hi[i] - lo[i]) / shape[i] as f64).collect();
        if h.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::OutOfRange("grid box must have positive extent".into()));
        }
        let mut strides = vec![1; dim];
        for i in (0..dim.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        Ok(Grid {
            dim,
            lo,
            hi,
            h,
            shape,
            strides,
            kinds: Vec::new(),
            weights: Vec::new(),
            polytope: None,
        })
    }

    fn classify(&self, inside: &[bool]) -> Vec<NodeKind> {
        (0..self.len())
            .map(|idx| {
                if !inside[idx] {
                    return NodeKind::Outside;
                }
                let all = self.neighborhood(idx).all(|nb| nb.is_some_and(|j| inside[j]));
                if all {
                    NodeKind::Interior
                } else {
                    NodeKind::Band
                }
            })
            .collect()
    }

    /// The 3^n block around `idx` (including `idx`); `None` where it leaves the grid.
    fn neighborhood(&self, idx: usize) -> impl Iterator<Item = Option<usize>> + '_ {
        let n = self.dim;
        let count = 3usize.pow(n as u32);
        (0..count).map(move |c| {
            let mut offs = vec![0i64; n];
            let mut r = c;
            for o in offs.iter_mut() {
                *o = (r % 3) as i64 - 1;
                r /= 3;
            }
            self.offset(idx, &offs)
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn h(&self) -> &[f64] {
        &self.h
    }
    pub fn h_max(&self) -> f64 {
        self.h.iter().cloned().fold(0.0, f64::max)
    }
    pub fn lo(&self) -> &[f64] {
        &self.lo
    }
    pub fn hi(&self) -> &[f64] {
        &self.hi
    }
    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }
    pub fn kind(&self, idx: usize) -> NodeKind {
        self.kinds[idx]
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn polytope(&self) -> Option<&Arc<Polytope>> {
        self.polytope.as_ref()
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut m = vec![0; self.dim];
        for i in 0..self.dim {
            m[i] = idx / self.strides[i];
            idx %= self.strides[i];
        }
        m
    }

    pub fn linear_index(&self, m: &[usize]) -> usize {
        m.iter().zip(&self.strides).map(|(a, s)| a * s).sum()
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        let m = self.multi_index(idx);
        (0..self.dim)
            .map(|i| self.lo[i] + (m[i] as f64 + 0.5) * self.h[i])
            .collect()
    }

    /// Node reached from `idx` by integer offsets, if it is on the grid.
    pub fn offset(&self, idx: usize, offs: &[i64]) -> Option<usize> {
        let m = self.multi_index(idx);
        let mut out = 0usize;
        for i in 0..self.dim {
            let t = m[i] as i64 + offs[i];
            if t < 0 || t >= self.shape[i] as i64 {
                return None;
            }
            out += t as usize * self.strides[i];
        }
        Some(out)
    }

    pub fn step(&self, idx: usize, axis: usize, by: i64) -> Option<usize> {
        let m = self.multi_index(idx)[axis] as i64 + by;
        if m < 0 || m >= self.shape[axis] as i64 {
            None
        } else {
            Some((idx as i64 + by * self.strides[axis] as i64) as usize)
        }
    }

    pub fn is_active(&self, idx: usize) -> bool {
        self.kinds[idx].is_active()
    }

    pub fn active_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_active(i)).collect()
    }

    /// Interior nodes with delta_k >= margin for every facet. Without a
    /// polytope, the margin is measured to the box faces.
    pub fn eroded_mask(&self, margin: f64) -> Vec<bool> {
        (0..self.len())
            .map(|idx| {
                if self.kinds[idx] != NodeKind::Interior {
                    return false;
                }
                let x = self.node(idx);
                match &self.polytope {
                    Some(p) => p.facet_distances(&x).iter().all(|d| *d >= margin),
                    None => (0..self.dim).all(|i| x[i] - self.lo[i] >= margin && self.hi[i] - x[i] >= margin),
                }
            })
            .collect()
    }

    /// Default residual margin 5 h max|a_k|.
    pub fn default_margin(&self) -> f64 {
        let a = self.polytope.as_ref().map_or(1.0, |p| p.max_normal_norm());
        5.0 * self.h_max() * a
    }

    /// Node nearest to `x` among active nodes.
    pub fn nearest_active(&self, x: &[f64]) -> Option<usize> {
        let m: Vec<usize> = (0..self.dim)
            .map(|i| {
                let t = ((x[i] - self.lo[i]) / self.h[i] - 0.5).round();
                t.clamp(0.0, (self.shape[i] - 1) as f64) as usize
            })
            .collect();
        let c = self.linear_index(&m);
        if self.is_active(c) {
            return Some(c);
        }
        let dist2 = |j: usize| -> f64 { self.node(j).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum() };
        self.active_nodes()
            .into_iter()
            .min_by(|a, b| dist2(*a).total_cmp(&dist2(*b)))
    }

    pub fn same_layout(&self, other: &Grid) -> bool {
        self.shape == other.shape && self.lo == other.lo && self.hi == other.hi
    }
}

fn cell_fraction(poly: &Polytope, center: &[f64], h: &[f64]) -> f64 {
    let n = center.len();
    let corners = 1usize << n;
    let all_in = (0..corners).all(|c| {
        let x: Vec<f64> = (0..n)
            .map(|i| center[i] + if c >> i & 1 == 1 { 0.5 } else { -0.5 } * h[i])
            .collect();
        poly.contains(&x, 0.0) != Containment::Outside
    });
    if all_in {
        return 1.0;
    }
    let s: usize = match n {
        1 => 64,
        2 => 16,
        _ => 8,
    };
    let total = s.pow(n as u32);
    let mut hit = 0usize;
    let mut x = vec![0.0; n];
    for c in 0..total {
        let mut r = c;
        for i in 0..n {
            let k = r % s;
            r /= s;
            x[i] = center[i] + ((k as f64 + 0.5) / s as f64 - 0.5) * h[i];
        }
        if poly.contains(&x, 0.0) == Containment::Interior {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

/// Scalar field on a grid. Values at `Outside` nodes are NaN.
#[derive(Clone, Debug)]
pub struct GridFn {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl GridFn {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::OutOfRange(format!(
                "value count {} does not match grid size {}",
                values.len(),
                grid.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if grid.is_active(i) && !v.is_finite() {
                return Err(Error::OutOfRange(format!("non-finite value at active node {i}")));
            }
        }
        Ok(GridFn { grid, values })
    }

    /// Like `new` but allows non-finite values (marking "undefined here").
    pub fn new_partial(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len());
        GridFn { grid, values }
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|i| if grid.is_active(i) { f(&grid.node(i)) } else { f64::NAN })
            .collect();
        GridFn { grid, values }
    }

    pub fn constant(grid: Arc<Grid>, c: f64) -> Self {
        GridFn::from_fn(grid, |_| c)
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        GridFn::constant(grid, 0.0)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFn {
        GridFn {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .enumerate()
                .map(|(i, v)| if self.grid.is_active(i) { f(*v) } else { f64::NAN })
                .collect(),
        }
    }

    /// Add an affine function c + <b, xi> at every active node.
    pub fn add_affine(&mut self, c: f64, b: &[f64]) {
        for i in 0..self.values.len() {
            if self.grid.is_active(i) {
                let x = self.grid.node(i);
                self.values[i] += c + x.iter().zip(b).map(|(a, bb)| a * bb).sum::<f64>();
            }
        }
    }

    /// Multilinear interpolation with linear extrapolation past the outer
    /// node layer. Falls back to the nearest active node when the stencil
    /// touches `Outside` nodes.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        self.try_interpolate(x)
            .unwrap_or_else(|| self.grid.nearest_active(x).map_or(f64::NAN, |j| self.values[j]))
    }

    /// Multilinear interpolation; `None` when a stencil value is not finite.
    pub fn try_interpolate(&self, x: &[f64]) -> Option<f64> {
        let g = &self.grid;
        let n = g.dim;
        let mut base = vec![0usize; n];
        let mut t = vec![0.0; n];
        for i in 0..n {
            let s = (x[i] - g.lo[i]) / g.h[i] - 0.5;
            if g.shape[i] == 1 {
                base[i] = 0;
                t[i] = 0.0;
                continue;
            }
            let b = s.floor().clamp(0.0, (g.shape[i] - 2) as f64);
            base[i] = b as usize;
            t[i] = s - b;
        }
        let mut acc = 0.0;
        for c in 0..(1usize << n) {
            let mut w = 1.0;
            let mut m = base.clone();
            for i in 0..n {
                let up = c >> i & 1 == 1;
                if g.shape[i] == 1 {
                    if up {
                        w = 0.0;
                    }
                    continue;
                }
                if up {
                    m[i] += 1;
                    w *= t[i];
                } else {
                    w *= 1.0 - t[i];
                }
            }
            if w == 0.0 {
                continue;
            }
            let v = self.values[g.linear_index(&m)];
            if !v.is_finite() {
                return None;
            }
            acc += w * v;
        }
        Some(acc)
    }

    /// Tensor cubic Lagrange interpolation on four consecutive nodes per axis,
    /// shifted inward near the edge of the node array. `None` when the array
    /// is too small or a stencil value is not finite.
    pub fn try_interpolate_cubic(&self, x: &[f64]) -> Option<f64> {
        let g = &self.grid;
        let n = g.dim;
        let mut base = vec![0usize; n];
        let mut w = vec![[0.0; 4]; n];
        for i in 0..n {
            if g.shape[i] < 4 {
                return None;
            }
            let s = (x[i] - g.lo[i]) / g.h[i] - 0.5;
            let b = (s.floor() - 1.0).clamp(0.0, (g.shape[i] - 4) as f64);
            base[i] = b as usize;
            let t = s - b;
            for (k, wk) in w[i].iter_mut().enumerate() {
                *wk = (0..4)
                    .filter(|&m| m != k)
                    .map(|m| (t - m as f64) / (k as f64 - m as f64))
                    .product();
            }
        }
        let mut acc = 0.0;
        let mut m = vec![0usize; n];
        for c in 0..4usize.pow(n as u32) {
            let mut wt = 1.0;
            let mut r = c;
            for i in 0..n {
                let k = r % 4;
                r /= 4;
                m[i] = base[i] + k;
                wt *= w[i][k];
            }
            let v = self.values[g.linear_index(&m)];
            if !v.is_finite() {
                return None;
            }
            acc += wt * v;
        }
        Some(acc)
    }

    pub fn max_abs_on(&self, mask: &[bool]) -> f64 {
        self.values
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .fold(0.0, |a, (v, _)| a.max(v.abs()))
    }

    pub fn max_on(&self, mask: &[bool]) -> f64 {
        self.values
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .fold(f64::NEG_INFINITY, |a, (v, _)| a.max(*v))
    }

    pub fn min_on(&self, mask: &[bool]) -> f64 {
        self.values
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .fold(f64::INFINITY, |a, (v, _)| a.min(*v))
    }

    pub fn active_mask(&self) -> Vec<bool> {
        self.grid.kinds.iter().map(|k| k.is_active()).collect()
    }
}
