use std::collections::VecDeque;

use serde::Serialize;

use super::spotential::SPotential;
use crate::discretize::NodeKind;

/// Connected sublevel set {u <= C} containing p, on the grid.
#[derive(Clone, Debug, Serialize)]
pub struct Section {
    pub mask: Vec<bool>,
    pub is_compact: bool,
    pub node_count: usize,
    /// Largest r with every active node within r of p in the section.
    pub inner_radius: f64,
    /// Smallest b with every section node within b of p.
    pub outer_radius: f64,
}

pub fn section(u: &SPotential, p: &[f64], c: f64) -> Section {
    let grid = u.grid();
    let vals = u.values();
    let mut mask = vec![false; grid.len()];
    let Some(start) = grid.nearest_active(p) else {
        return Section {
            mask,
            is_compact: true,
            node_count: 0,
            inner_radius: 0.0,
            outer_radius: 0.0,
        };
    };
    let n = grid.dim();
    let mut queue = VecDeque::new();
    if vals.get(start) <= c {
        mask[start] = true;
        queue.push_back(start);
    }
    while let Some(i) = queue.pop_front() {
        for axis in 0..n {
            for dir in [-1, 1] {
                if let Some(j) = grid.step(i, axis, dir) {
                    if !mask[j] && grid.is_active(j) && vals.get(j) <= c {
                        mask[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    let dist = |i: usize| -> f64 {
        grid.node(i)
            .iter()
            .zip(p)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let is_compact = !(0..grid.len()).any(|i| mask[i] && grid.kind(i) == NodeKind::Band);
    let outer_radius = (0..grid.len()).filter(|&i| mask[i]).map(dist).fold(0.0, f64::max);
    let inner_radius = (0..grid.len())
        .filter(|&i| !mask[i])
        .map(dist)
        .fold(f64::INFINITY, f64::min);
    Section {
        node_count: mask.iter().filter(|b| **b).count(),
        mask,
        is_compact,
        inner_radius,
        outer_radius,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::{Grid, GridFn};
    use crate::polytope::Polytope;
    use crate::potentials::normalize_at;
    use std::sync::Arc;

    #[test]
    fn parabola_section() {
        let g = Arc::new(Grid::new(Arc::new(Polytope::interval(0.0, 1.0)), 1.0 / 100.0).unwrap());
        let u = SPotential::build(
            GridFn::from_fn(g.clone(), |x| (x[0] - 0.5).powi(2)),
            vec![0.5],
            false,
            None,
        )
        .unwrap();
        let s = section(&u, &[0.5], 0.01);
        assert!(s.is_compact);
        for i in 0..g.len() {
            let x = g.node(i)[0];
            assert_eq!(s.mask[i], (x - 0.5).powi(2) <= 0.01, "{x}");
            if s.mask[i] {
                assert!(x > 0.4 - 1e-12 && x < 0.6 + 1e-12);
            }
        }
        let all = section(&u, &[0.5], 1.0);
        assert!(!all.is_compact);
        assert_eq!(all.node_count, g.active_nodes().len());
    }

    #[test]
    fn guillemin_ball_sandwich() {
        let u = SPotential::guillemin(Arc::new(Polytope::unit_square()), 1.0 / 64.0, vec![0.5, 0.5]).unwrap();
        let u = normalize_at(&u).unwrap();
        let s = section(&u, &[0.5, 0.5], 0.05);
        assert!(s.is_compact);
        assert!(s.inner_radius > 0.0 && s.inner_radius <= s.outer_radius + 2.0 / 64.0);
        // near p the potential is ~ 2|x - p|^2
        let r = (0.05f64 / 2.0).sqrt();
        assert!(s.inner_radius > 0.8 * r && s.outer_radius < 1.2 * r);
    }
}
