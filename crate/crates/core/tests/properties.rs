//! Property checks on the functionals and the geometry.

use std::sync::Arc;

use approx::assert_relative_eq;
use proptest::prelude::*;

use abreu_core::discretize::{Grid, GridFn};
use abreu_core::field::DensityPair;
use abreu_core::functionals::{l_functional_fn, mabuchi, Kink, LQuadrature, PlFunction};
use abreu_core::polytope::Polytope;
use abreu_core::potentials::{guillemin_det_product, SPotential};

const FLOOR: f64 = 1e-12;

fn square() -> Arc<Polytope> {
    Arc::new(Polytope::unit_square())
}

/// c0 + c1 x + c2 y + c3 x^2 + c4 xy + c5 y^2 + c6 sin(pi x) cos(pi y).
fn test_fn(c: &[f64]) -> impl Fn(&[f64]) -> f64 + '_ {
    move |p: &[f64]| {
        let (x, y) = (p[0], p[1]);
        c[0] + c[1] * x
            + c[2] * y
            + c[3] * x * x
            + c[4] * x * y
            + c[5] * y * y
            + c[6] * (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).cos()
    }
}

fn coeffs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn l_is_linear(c1 in coeffs(), c2 in coeffs(), s in -4.0..4.0f64) {
        let sq = square();
        let dp = DensityPair::constant(1.0, 4.0);
        let h = 1.0 / 32.0;
        let f = test_fn(&c1);
        let g = test_fn(&c2);
        let lf = l_functional_fn(&sq, &dp, h, &f).unwrap();
        let lg = l_functional_fn(&sq, &dp, h, &g).unwrap();
        let lsum = l_functional_fn(&sq, &dp, h, |p| s * f(p) + g(p)).unwrap();
        prop_assert!((lsum - (s * lf + lg)).abs() <= 1e-10 * (1.0 + lsum.abs()));
    }

    #[test]
    fn l_vanishes_on_affine_when_balanced(a0 in -5.0..5.0f64, a1 in -5.0..5.0f64, a2 in -5.0..5.0f64) {
        let l = l_functional_fn(&square(), &DensityPair::constant(1.0, 4.0), 1.0 / 32.0, |p| a0 + a1 * p[0] + a2 * p[1]).unwrap();
        prop_assert!(l.abs() <= 1e-10, "{l}");
    }

    #[test]
    fn pl_ratio_is_scale_invariant(qx in 0.1..0.9f64, bx in -1.0..1.0f64, by in -1.0..1.0f64, s in 0.1..10.0f64) {
        prop_assume!(bx.abs() + by.abs() > 0.1);
        let grid = Grid::new(square(), 1.0 / 32.0).unwrap();
        let q = LQuadrature::new(&grid, &DensityPair::constant(1.0, 4.0));
        let u = PlFunction { kinks: vec![Kink { b: vec![bx, by], q: vec![qx, 0.5] }] };
        if let (Some(r1), Some(r2)) = (u.ratio(&q), u.scaled(s).ratio(&q)) {
            prop_assert!((r1 - r2).abs() <= 1e-10);
        }
    }

    #[test]
    fn guillemin_det_product_is_constant_on_boxes(x in 0.001..0.999f64, y in 0.001..0.999f64, w in 0.5..3.0f64) {
        let b = Polytope::cuboid(&[0.0, 0.0], &[w, 1.0]);
        let d = guillemin_det_product(&b, &[x * w, y]).unwrap();
        // equals the product of the side lengths
        prop_assert!((d - w).abs() <= 1e-10 * w, "{d} vs {w}");
    }

    #[test]
    fn facet_distances_agree_with_containment(x in -0.5..1.5f64, y in -0.5..1.5f64) {
        let t = Polytope::simplex(2);
        let inside = x > 0.0 && y > 0.0 && x + y < 1.0;
        let all_positive = t.facet_distances(&[x, y]).iter().all(|d| *d > 0.0);
        prop_assert_eq!(inside, all_positive);
    }
}

/// phi = c (sin(pi x) + sin(pi y)) with |c| small keeps u = v + phi convex.
fn perturbed(grid: &Arc<Grid>, c: f64) -> SPotential {
    let phi = GridFn::from_fn(grid.clone(), |p| {
        c * ((std::f64::consts::PI * p[0]).sin() + (std::f64::consts::PI * p[1]).sin())
    });
    SPotential::new(phi, vec![0.5, 0.5]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn mabuchi_is_convex_along_segments(c0 in -0.3..0.3f64, c1 in -0.3..0.3f64) {
        let grid = Arc::new(Grid::new(square(), 1.0 / 32.0).unwrap());
        let dp = DensityPair::constant(1.0, 4.0);
        let f = |c: f64| mabuchi(&perturbed(&grid, c), &dp, FLOOR).unwrap();
        let mid = f(0.5 * (c0 + c1));
        prop_assert!(mid <= 0.5 * (f(c0) + f(c1)) + 1e-10);
    }

    #[test]
    fn guillemin_minimizes_on_the_square(c in -0.3..0.3f64) {
        prop_assume!(c.abs() > 1e-3);
        let grid = Arc::new(Grid::new(square(), 1.0 / 32.0).unwrap());
        let dp = DensityPair::constant(1.0, 4.0);
        let base = mabuchi(&perturbed(&grid, 0.0), &dp, FLOOR).unwrap();
        prop_assert!(mabuchi(&perturbed(&grid, c), &dp, FLOOR).unwrap() > base);
    }
}

#[test]
fn mabuchi_is_invariant_under_affine_changes() {
    let grid = Arc::new(Grid::new(square(), 1.0 / 32.0).unwrap());
    let dp = DensityPair::constant(1.0, 4.0);
    let u = perturbed(&grid, 0.1);
    let shifted = u
        .with_phi(GridFn::from_fn(grid.clone(), |p| {
            0.1 * ((std::f64::consts::PI * p[0]).sin() + (std::f64::consts::PI * p[1]).sin()) + 2.0 - p[0] + 3.0 * p[1]
        }))
        .unwrap();
    assert_relative_eq!(
        mabuchi(&u, &dp, FLOOR).unwrap(),
        mabuchi(&shifted, &dp, FLOOR).unwrap(),
        epsilon = 1e-10
    );
}
