//! Independent reference implementations used only by tests.
//!
//! Everything here deliberately avoids the production code paths: the Jacobi
//! eigensolver exists so power-iteration tests have an SVD oracle to compare
//! against, golden-section search gives an optimizer-free check of the
//! closed-form rescale factor, and the finite-difference driver probes
//! analytic gradients one coordinate at a time.

use alloc::vec;
use alloc::vec::Vec;

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), sorted descending.
#[allow(clippy::needless_range_loop)]
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i][j] * m[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let eigvals: Vec<f64> = order.iter().map(|&i| m[i][i]).collect();
    let eigvecs: Vec<Vec<f64>> =
        order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (eigvals, eigvecs)
}

/// Minimizes a unimodal function on [lo, hi] by golden-section search.
pub fn golden_section_min<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = 0.618_033_988_749_894_9;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while (hi - lo).abs() > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Central finite difference of `f` along coordinate `i` of `x`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    plus[i] += h;
    let mut minus = x.to_vec();
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

#[cfg(test)]
// Expected values are frozen literals on purpose, even where they happen to
// match a library constant.
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(5, 2) rotated by 45 degrees has eigenvalues 5 and 2.
        let a = vec![vec![3.5, 1.5], vec![1.5, 3.5]];
        let (vals, vecs) = jacobi_eigen(&a);
        assert!((vals[0] - 5.0).abs() < 1e-12);
        assert!((vals[1] - 2.0).abs() < 1e-12);
        let top = &vecs[0];
        let norm = (top[0] * top[0] + top[1] * top[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // Top eigenvector is (1,1)/sqrt(2) up to sign.
        assert!((top[0].abs() - 0.7071067811865476).abs() < 1e-10);
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        // Comparisons near the minimum drown in rounding noise once
        // (x - 1.25)^2 falls under eps * 3, i.e. within ~2.6e-8 of the
        // minimizer, so only ~1e-7 accuracy is actually attainable here.
        let x = golden_section_min(|t| (t - 1.25) * (t - 1.25) + 3.0, -10.0, 10.0, 1e-10);
        assert!((x - 1.25).abs() < 1e-6, "{x}");
    }

    #[test]
    fn central_diff_matches_polynomial_derivative() {
        let mut f = |x: &[f64]| x[0] * x[0] * x[0] + 2.0 * x[1];
        let g0 = central_diff(&mut f, &[2.0, 5.0], 0, 1e-5);
        assert!((g0 - 12.0).abs() < 1e-7);
        let g1 = central_diff(&mut f, &[2.0, 5.0], 1, 1e-5);
        assert!((g1 - 2.0).abs() < 1e-7);
    }
}
