//! Feature dispersion.
//!
//! Node embeddings concentrate along the dominant right-singular direction of
//! the embedding matrix after repeated neighborhood smoothing. Dispersion
//! pushes back: find an approximation `p` of that direction by power
//! iteration, then shrink every embedding's component along it,
//! `V (I - eps * p p^T / ||p||^2)`. Neither `V^T V` nor the projector is ever
//! materialized; everything runs through matrix-vector products.
//!
//! The Monte-Carlo validator at the bottom estimates the expected per-mode
//! shrink factors and checks they grow toward 1 for smaller singular values,
//! i.e. dispersion dampens dominant modes the most.

use alloc::format;
use alloc::vec::Vec;
use rand::Rng;

use crate::linalg::{norm_sq, DenseMatrix};
use crate::rng::{normal_vec, stream, Stream};
use crate::{Error, Result};

/// Norm below which an iterated projection vector counts as collapsed.
const DEGENERATE_NORM_SQ: f64 = 1e-24;

/// Attempts before [`sample_projection`] gives up on degenerate draws.
const MAX_DRAWS: usize = 3;

/// Hyperparameters of the dispersion step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionConfig {
    /// Power-iteration count applied to the initial random direction.
    pub power_iterations: usize,
    /// Dispersion strength; 0 disables the step, 1 would remove the
    /// component entirely.
    pub epsilon: f64,
}

impl DispersionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be in [0, 1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// An iterated projection direction `p` with its cached squared norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionState {
    direction: Vec<f64>,
    norm_sq: f64,
    iterations: usize,
}

impl ProjectionState {
    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }
}

/// Runs `iterations` rounds of `p <- V^T (V p)` from the given start vector.
/// With zero iterations the start vector itself becomes the direction.
pub fn power_iterate(v: &DenseMatrix, p0: Vec<f64>, iterations: usize) -> Result<ProjectionState> {
    if p0.len() != v.cols() {
        return Err(Error::DimensionMismatch { expected: v.cols(), got: p0.len() });
    }
    let mut p = p0;
    if norm_sq(&p) < DEGENERATE_NORM_SQ {
        return Err(Error::DegenerateProjection);
    }
    for _ in 0..iterations {
        let q = v.matvec(&p);
        p = v.tr_matvec(&q);
        if norm_sq(&p) < DEGENERATE_NORM_SQ {
            return Err(Error::DegenerateProjection);
        }
    }
    let ns = norm_sq(&p);
    Ok(ProjectionState { direction: p, norm_sq: ns, iterations })
}

/// Draws a standard-normal start vector and power-iterates it. Degenerate
/// draws (collapsed norm) are redrawn up to three times before erroring.
pub fn sample_projection<R: Rng>(
    v: &DenseMatrix,
    iterations: usize,
    rng: &mut R,
) -> Result<ProjectionState> {
    for attempt in 0..MAX_DRAWS {
        let p0 = normal_vec(rng, v.cols());
        match power_iterate(v, p0, iterations) {
            Ok(state) => return Ok(state),
            Err(Error::DegenerateProjection) if attempt + 1 < MAX_DRAWS => {
                log::debug!("projection collapsed, redrawing (attempt {})", attempt + 2);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateProjection)
}

/// `V (I - eps * p p^T / ||p||^2)`, computed as a rank-one row update.
///
/// The same operator propagates gradients: the projector is symmetric, so the
/// backward pass through dispersion is this function applied to the upstream
/// gradient (with `p` held constant).
#[allow(clippy::needless_range_loop)]
pub fn disperse(v: &DenseMatrix, proj: &ProjectionState, epsilon: f64) -> DenseMatrix {
    let q = v.matvec(proj.direction());
    let scale = epsilon / proj.norm_sq();
    let mut out = v.clone();
    for r in 0..out.rows() {
        let w = scale * q[r];
        for (o, pj) in out.row_mut(r).iter_mut().zip(proj.direction()) {
            *o -= w * pj;
        }
    }
    out
}

/// Fixed shard count for the Monte-Carlo validator. Results are identical for
/// any worker count because shards, not threads, own RNG streams.
pub const SHRINK_SHARDS: usize = 16;

/// Per-shard accumulation of shrink-factor samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkPartial {
    pub samples: usize,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

/// One output row of the validator: mode index (1-based, largest singular
/// value first), its singular value, the estimated expected shrink factor,
/// and the standard error of that estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkRow {
    pub k: usize,
    pub sigma: f64,
    pub mu_hat: f64,
    pub stderr: f64,
}

/// Aggregated Monte-Carlo estimate of the per-mode shrink factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkReport {
    pub rows: Vec<ShrinkRow>,
    pub epsilon: f64,
    pub power_iterations: usize,
    pub samples: usize,
    /// Adjacent pairs where the ordering mu[k] <= mu[k+1] is violated by more
    /// than three combined standard errors.
    pub violations: usize,
}

impl ShrinkReport {
    pub fn ascending_at_three_sigma(&self) -> bool {
        self.violations == 0
    }
}

fn shard_sample_count(total: usize, shard: usize) -> usize {
    let base = total / SHRINK_SHARDS;
    let rem = total % SHRINK_SHARDS;
    base + usize::from(shard < rem)
}

/// Runs one shard of the validator: draws start vectors, rotates them by the
/// fixed orthonormal basis derived from `seed`, and accumulates per-mode
/// shrink factors `1 - eps * t_k^2 s_k^{4K} / sum_j t_j^2 s_j^{4K}`.
pub fn shrink_shard(
    sigma: &[f64],
    power_iterations: usize,
    epsilon: f64,
    total_samples: usize,
    seed: u64,
    shard: usize,
) -> ShrinkPartial {
    assert!(shard < SHRINK_SHARDS);
    let dim = sigma.len();
    let basis = random_orthonormal(dim, dim, &mut stream(seed, Stream::Init));
    // Precompute s_k^{4K}.
    let pow4k: Vec<f64> = sigma
        .iter()
        .map(|&s| {
            let mut acc = 1.0;
            for _ in 0..4 * power_iterations {
                acc *= s;
            }
            acc
        })
        .collect();

    let mut rng = stream(seed, Stream::Dispersion);
    rng.set_stream(1_000 + shard as u64);
    let samples = shard_sample_count(total_samples, shard);
    let mut sum = alloc::vec![0.0; dim];
    let mut sum_sq = alloc::vec![0.0; dim];
    for _ in 0..samples {
        let p0 = normal_vec(&mut rng, dim);
        let t = basis.tr_matvec(&p0);
        let weights: Vec<f64> = t.iter().zip(&pow4k).map(|(tk, pk)| tk * tk * pk).collect();
        let total: f64 = weights.iter().sum();
        for (k, w) in weights.iter().enumerate() {
            let mu = 1.0 - epsilon * w / total;
            sum[k] += mu;
            sum_sq[k] += mu * mu;
        }
    }
    ShrinkPartial { samples, sum, sum_sq }
}

/// Merges shard partials into the final report. Shards must be supplied in
/// shard order for bit-reproducible output.
pub fn shrink_report(
    sigma: &[f64],
    power_iterations: usize,
    epsilon: f64,
    partials: &[ShrinkPartial],
) -> ShrinkReport {
    let dim = sigma.len();
    let mut samples = 0usize;
    let mut sum = alloc::vec![0.0; dim];
    let mut sum_sq = alloc::vec![0.0; dim];
    for p in partials {
        samples += p.samples;
        for k in 0..dim {
            sum[k] += p.sum[k];
            sum_sq[k] += p.sum_sq[k];
        }
    }
    let n = samples as f64;
    let rows: Vec<ShrinkRow> = (0..dim)
        .map(|k| {
            let mean = sum[k] / n;
            let var = ((sum_sq[k] - sum[k] * sum[k] / n) / (n - 1.0)).max(0.0);
            ShrinkRow {
                k: k + 1,
                sigma: sigma[k],
                mu_hat: mean,
                stderr: crate::math::sqrt(var / n),
            }
        })
        .collect();
    let violations = rows
        .windows(2)
        .filter(|w| {
            let gap = w[0].mu_hat - w[1].mu_hat;
            let noise = 3.0 * crate::math::sqrt(w[0].stderr * w[0].stderr + w[1].stderr * w[1].stderr);
            gap > noise
        })
        .count();
    ShrinkReport { rows, epsilon, power_iterations, samples, violations }
}

/// Single-threaded validator over singular values `dim, dim-1, ..., 1`
/// (descending, distinct). Shard-by-shard, so a threaded driver that fans the
/// shards out reproduces exactly this output.
pub fn validate_shrink_ordering(
    dim: usize,
    power_iterations: usize,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<ShrinkReport> {
    let sigma: Vec<f64> = (1..=dim).rev().map(|s| s as f64).collect();
    validate_shrink_ordering_for_sigma(&sigma, power_iterations, epsilon, samples, seed)
}

/// Validator over caller-chosen singular values (descending, distinct).
pub fn validate_shrink_ordering_for_sigma(
    sigma: &[f64],
    power_iterations: usize,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<ShrinkReport> {
    if sigma.len() < 2 {
        return Err(Error::InvalidConfig("need at least two singular values".into()));
    }
    if sigma.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidConfig("singular values must be descending and distinct".into()));
    }
    if samples < SHRINK_SHARDS {
        return Err(Error::InvalidConfig(format!("need at least {SHRINK_SHARDS} samples")));
    }
    let partials: Vec<ShrinkPartial> = (0..SHRINK_SHARDS)
        .map(|shard| shrink_shard(sigma, power_iterations, epsilon, samples, seed, shard))
        .collect();
    Ok(shrink_report(sigma, power_iterations, epsilon, &partials))
}

/// Matrix with orthonormal columns: Gaussian entries, then modified
/// Gram-Schmidt. `rows >= cols` required.
pub fn random_orthonormal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    assert!(rows >= cols, "cannot orthonormalize {cols} columns in {rows} rows");
    let mut m = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        let row = normal_vec(rng, cols);
        m.row_mut(r).copy_from_slice(&row);
    }
    for j in 0..cols {
        for i in 0..j {
            let mut proj = 0.0;
            for r in 0..rows {
                proj += m.row(r)[i] * m.row(r)[j];
            }
            for r in 0..rows {
                let vi = m.row(r)[i];
                m.row_mut(r)[j] -= proj * vi;
            }
        }
        let mut ns = 0.0;
        for r in 0..rows {
            ns += m.row(r)[j] * m.row(r)[j];
        }
        let inv = 1.0 / crate::math::sqrt(ns);
        for r in 0..rows {
            m.row_mut(r)[j] *= inv;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::jacobi_eigen;
    use crate::rng::{normal_vec, stream, Stream};
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn power_iterate_diagonal_example() {
        // V = diag(2, 1), p0 = (1, 1): one round gives V^T V p0 = (4, 1).
        let v = DenseMatrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 1.0]);
        let state = power_iterate(&v, vec![1.0, 1.0], 1).unwrap();
        assert_eq!(state.direction(), &[4.0, 1.0]);
        assert_eq!(state.norm_sq(), 17.0);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn power_iteration_aligns_with_top_singular_direction() {
        let mut rng = stream(11, Stream::Init);
        let mut v = DenseMatrix::zeros(8, 4);
        for r in 0..8 {
            let row = normal_vec(&mut rng, 4);
            v.row_mut(r).copy_from_slice(&row);
        }
        // Oracle: top eigenvector of V^T V from the Jacobi solver.
        let mut vtv = vec![vec![0.0f64; 4]; 4];
        for (i, vtv_row) in vtv.iter_mut().enumerate() {
            for j in 0..4 {
                vtv_row[j] = (0..8).map(|r| v.row(r)[i] * v.row(r)[j]).sum();
            }
        }
        let (_, vecs) = jacobi_eigen(&vtv);
        let top = &vecs[0];

        let p0 = normal_vec(&mut stream(12, Stream::Dispersion), 4);
        let cos0 = alignment(&p0, top);
        let p3 = power_iterate(&v, p0.clone(), 3).unwrap();
        let cos3 = alignment(p3.direction(), top);
        assert!(cos3 > cos0, "alignment did not improve: {cos0} -> {cos3}");
        // Many more rounds converge onto the oracle direction outright.
        let p12 = power_iterate(&v, p0, 12).unwrap();
        assert!(alignment(p12.direction(), top) > 0.999);
    }

    fn alignment(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        (dot / (crate::linalg::norm_sq(a) * crate::linalg::norm_sq(b)).sqrt()).abs()
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn disperse_identity_example() {
        // V = I_2, p = (3, 4), eps = 0.5.
        let v = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let proj = power_iterate(&v, vec![3.0, 4.0], 0).unwrap();
        let out = disperse(&v, &proj, 0.5);
        let expected = [[0.82, -0.24], [-0.24, 0.68]];
        for r in 0..2 {
            for c in 0..2 {
                assert!(
                    (out.row(r)[c] - expected[r][c]).abs() < 1e-12,
                    "entry ({r},{c}) = {}",
                    out.row(r)[c]
                );
            }
        }
    }

    #[test]
    fn epsilon_zero_is_bitwise_identity() {
        let v = DenseMatrix::from_vec(2, 3, vec![0.3, -1.2, 0.0, 2.5, -0.1, 7.0]);
        let proj = power_iterate(&v, vec![1.0, 2.0, -0.5], 1).unwrap();
        assert_eq!(disperse(&v, &proj, 0.0), v);
    }

    #[test]
    fn degenerate_projection_errors_after_retries() {
        let v = DenseMatrix::zeros(3, 2);
        let mut rng = stream(5, Stream::Dispersion);
        assert_eq!(
            sample_projection(&v, 2, &mut rng).unwrap_err(),
            Error::DegenerateProjection
        );
    }

    #[test]
    fn config_rejects_out_of_range_epsilon() {
        assert!(DispersionConfig { power_iterations: 1, epsilon: 1.0 }.validate().is_err());
        assert!(DispersionConfig { power_iterations: 1, epsilon: -0.1 }.validate().is_err());
        assert!(DispersionConfig { power_iterations: 0, epsilon: 0.0 }.validate().is_ok());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn shrink_formula_matches_actual_pipeline() {
        // Build V = U1 diag(sigma) U2^T with known factors, then confirm the
        // closed-form per-mode shrink equals what power-iterate + disperse
        // actually does to the diagonal, sample by sample.
        let sigma = [3.0, 2.0, 1.0];
        let (rows, cols) = (6, 3);
        let mut rng = stream(21, Stream::Init);
        let u1 = random_orthonormal(rows, cols, &mut rng);
        let u2 = random_orthonormal(cols, cols, &mut rng);
        let mut v = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for k in 0..cols {
                    acc += u1.row(r)[k] * sigma[k] * u2.row(c)[k];
                }
                v.row_mut(r)[c] = acc;
            }
        }

        let eps = 0.5;
        let iters = 2;
        let mut draw_rng = stream(22, Stream::Dispersion);
        for _ in 0..20 {
            let p0 = normal_vec(&mut draw_rng, cols);
            // Closed form: t = U2^T p0, shrink_k proportional to t_k^2 s_k^{4K}.
            let t = u2.tr_matvec(&p0);
            let weights: Vec<f64> = t
                .iter()
                .zip(&sigma)
                .map(|(tk, s)| tk * tk * s.powi(4 * iters as i32))
                .collect();
            let total: f64 = weights.iter().sum();

            let proj = power_iterate(&v, p0, iters).unwrap();
            let tilde = disperse(&v, &proj, eps);
            // Diagonal of U1^T tilde U2 should be sigma_k * (1 - eps * shrink_k).
            for k in 0..cols {
                let mut dkk = 0.0;
                for r in 0..rows {
                    let mut tu2 = 0.0;
                    for c in 0..cols {
                        tu2 += tilde.row(r)[c] * u2.row(c)[k];
                    }
                    dkk += u1.row(r)[k] * tu2;
                }
                let want = sigma[k] * (1.0 - eps * weights[k] / total);
                assert!((dkk - want).abs() < 1e-10, "mode {k}: {dkk} vs {want}");
            }
        }
    }

    #[test]
    fn validator_orders_shrink_factors_by_singular_value() {
        let report = validate_shrink_ordering_for_sigma(&[3.0, 2.0, 1.0], 1, 0.5, 20_000, 77).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.rows[0].mu_hat < report.rows[1].mu_hat);
        assert!(report.rows[1].mu_hat < report.rows[2].mu_hat);
        assert!(report.ascending_at_three_sigma(), "violations: {}", report.violations);
        for row in &report.rows {
            assert!(row.mu_hat > 1.0 - report.epsilon - 1e-12 && row.mu_hat < 1.0);
            assert!(row.stderr > 0.0 && row.stderr < 0.01);
        }
    }

    #[test]
    fn validator_is_shard_merge_invariant() {
        // Merging the shards by hand must equal the convenience wrapper.
        let sigma = [4.0, 2.5, 1.0];
        let partials: Vec<ShrinkPartial> = (0..SHRINK_SHARDS)
            .map(|s| shrink_shard(&sigma, 1, 0.3, 1_600, 9, s))
            .collect();
        let merged = shrink_report(&sigma, 1, 0.3, &partials);
        let direct = validate_shrink_ordering_for_sigma(&sigma, 1, 0.3, 1_600, 9).unwrap();
        assert_eq!(merged, direct);
    }

    #[test]
    fn orthonormal_basis_is_orthonormal() {
        let mut rng = stream(3, Stream::Init);
        let u = random_orthonormal(8, 5, &mut rng);
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = (0..8).map(|r| u.row(r)[i] * u.row(r)[j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12, "({i},{j}) dot {dot}");
            }
        }
    }

    proptest! {
        // Applying dispersion twice with the same direction equals one
        // application with strength 2*eps - eps^2: the projector is idempotent.
        #[test]
        fn double_dispersion_composes_idempotently(
            seed in 0u64..500,
            eps in 0.0f64..0.99,
        ) {
            let mut rng = stream(seed, Stream::Init);
            let mut v = DenseMatrix::zeros(5, 3);
            for r in 0..5 {
                let row = normal_vec(&mut rng, 3);
                v.row_mut(r).copy_from_slice(&row);
            }
            let proj = power_iterate(&v, normal_vec(&mut rng, 3), 1).unwrap();
            let twice = disperse(&disperse(&v, &proj, eps), &proj, eps);
            let fused = disperse(&v, &proj, 2.0 * eps - eps * eps);
            for r in 0..5 {
                for c in 0..3 {
                    prop_assert!((twice.row(r)[c] - fused.row(r)[c]).abs() < 1e-10);
                }
            }
        }

        // Dispersion never grows the Frobenius norm for eps in [0, 1).
        #[test]
        fn dispersion_never_grows_frobenius_norm(
            seed in 0u64..500,
            eps in 0.0f64..0.99,
        ) {
            let mut rng = stream(seed, Stream::Sampling);
            let mut v = DenseMatrix::zeros(6, 4);
            for r in 0..6 {
                let row = normal_vec(&mut rng, 4);
                v.row_mut(r).copy_from_slice(&row);
            }
            let proj = power_iterate(&v, normal_vec(&mut rng, 4), 2).unwrap();
            let tilde = disperse(&v, &proj, eps);
            prop_assert!(tilde.frobenius_sq() <= v.frobenius_sq() * (1.0 + 1e-12));
        }

        // Dispersion acts on feature space, propagation on node space, so the
        // two commute.
        #[test]
        fn dispersion_commutes_with_propagation(seed in 0u64..200) {
            use crate::graph::BipartiteGraph;
            let mut rng = stream(seed, Stream::Init);
            let g = BipartiteGraph::from_edges(
                3,
                3,
                vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2)],
            )
            .unwrap();
            let adj = g.normalize();
            let mut v = DenseMatrix::zeros(6, 4);
            for r in 0..6 {
                let row = normal_vec(&mut rng, 4);
                v.row_mut(r).copy_from_slice(&row);
            }
            let proj = power_iterate(&v, normal_vec(&mut rng, 4), 1).unwrap();
            let a = adj.spmm(&disperse(&v, &proj, 0.4));
            let b = disperse(&adj.spmm(&v), &proj, 0.4);
            for r in 0..6 {
                for c in 0..4 {
                    prop_assert!((a.row(r)[c] - b.row(r)[c]).abs() < 1e-10);
                }
            }
        }
    }
}
