//! Small dense helpers for n x n matrices stored row-major in flat slices.
//! Dimensions here are the polytope dimension (n <= 3 in practice), so the
//! closed forms below cover the hot paths and nalgebra handles the rest.

use nalgebra::DMatrix;

pub fn det(m: &[f64], n: usize) -> f64 {
    debug_assert_eq!(m.len(), n * n);
    match n {
        0 => 1.0,
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => DMatrix::from_row_slice(n, n, m).determinant(),
    }
}

/// Inverse, or `None` when the determinant is exactly zero or not finite.
pub fn inverse(m: &[f64], n: usize) -> Option<Vec<f64>> {
    let d = det(m, n);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    match n {
        1 => Some(vec![1.0 / m[0]]),
        2 => Some(vec![m[3] / d, -m[1] / d, -m[2] / d, m[0] / d]),
        3 => {
            let c = cofactor(m, 3);
            // inverse = adj / det = cofactor^T / det
            let mut inv = vec![0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    inv[i * 3 + j] = c[j * 3 + i] / d;
                }
            }
            Some(inv)
        }
        _ => DMatrix::from_row_slice(n, n, m)
            .try_inverse()
            .map(|inv| (0..n * n).map(|k| inv[(k / n, k % n)]).collect()),
    }
}

/// Cofactor matrix C with C_ij = (-1)^(i+j) M_ij. For symmetric input this is
/// det(m) * m^{-1}, and it stays well defined when m is singular.
pub fn cofactor(m: &[f64], n: usize) -> Vec<f64> {
    match n {
        1 => vec![1.0],
        2 => vec![m[3], -m[2], -m[1], m[0]],
        3 => {
            let a = |i: usize, j: usize| m[i * 3 + j];
            let mut c = vec![0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    let (r0, r1) = others(i);
                    let (c0, c1) = others(j);
                    let minor = a(r0, c0) * a(r1, c1) - a(r0, c1) * a(r1, c0);
                    let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                    c[i * 3 + j] = sign * minor;
                }
            }
            c
        }
        _ => {
            let mut c = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let minor: Vec<f64> = (0..n)
                        .filter(|&r| r != i)
                        .flat_map(|r| (0..n).filter(move |&s| s != j).map(move |s| m[r * n + s]))
                        .collect();
                    let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                    c[i * n + j] = sign * det(&minor, n - 1);
                }
            }
            c
        }
    }
}

fn others(i: usize) -> (usize, usize) {
    match i {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

pub fn min_eigenvalue(m: &[f64], n: usize) -> f64 {
    match n {
        1 => m[0],
        2 => {
            let tr = m[0] + m[3];
            let d = m[0] * m[3] - m[1] * m[2];
            let disc = ((m[0] - m[3]).powi(2) + 4.0 * m[1] * m[2]).max(0.0).sqrt();
            // stable smaller root
            if tr > 0.0 {
                d / (0.5 * (tr + disc))
            } else {
                0.5 * (tr - disc)
            }
        }
        _ => DMatrix::from_row_slice(n, n, m)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min),
    }
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solve a small dense system; `None` when singular.
pub fn solve(m: &[f64], rhs: &[f64], n: usize) -> Option<Vec<f64>> {
    let lu = DMatrix::from_row_slice(n, n, m).lu();
    lu.solve(&nalgebra::DVector::from_column_slice(rhs))
        .map(|x| x.iter().cloned().collect())
}

/// Least-squares slope and intercept of y against x.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Fitted convergence order p from (h, error) pairs, error ~ C h^p.
pub fn fitted_order(h: &[f64], err: &[f64]) -> f64 {
    let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).0
}
