//! Validation drivers behind `bgch validate`: a Monte-Carlo check that
//! dispersion shrinks dominant modes hardest, and a fuzz harness for the
//! Hamming-form scoring identity.

use std::thread;

use bgch_core::convhash::{words_per_segment, HashCodeTable};
use bgch_core::dispersion::{shrink_report, shrink_shard, ShrinkPartial, ShrinkReport, SHRINK_SHARDS};
use bgch_core::retrieval::{hamming_distance, QueryCode, RetrievalIndex};
use bgch_core::rng::{stream, Stream};
use rand::Rng;

use crate::error::{Error, Result};

/// Monte-Carlo shrink-factor validator with the shards fanned out over at
/// most `threads` workers. Output is bitwise independent of `threads`
/// because shards own their RNG streams and are merged in shard order.
pub fn shrink_ordering_threaded(
    sigma: &[f64],
    power_iterations: usize,
    epsilon: f64,
    samples: usize,
    seed: u64,
    threads: usize,
) -> Result<ShrinkReport> {
    if sigma.len() < 2 || sigma.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Usage(
            "singular values must be descending and distinct".into(),
        ));
    }
    let workers = threads.clamp(1, SHRINK_SHARDS);
    let mut partials: Vec<Option<ShrinkPartial>> = vec![None; SHRINK_SHARDS];
    thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for worker in 0..workers {
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut shard = worker;
                while shard < SHRINK_SHARDS {
                    out.push((
                        shard,
                        shrink_shard(sigma, power_iterations, epsilon, samples, seed, shard),
                    ));
                    shard += workers;
                }
                out
            }));
        }
        for handle in handles {
            for (shard, partial) in handle.join().expect("validator worker panicked") {
                partials[shard] = Some(partial);
            }
        }
    });
    let partials: Vec<ShrinkPartial> = partials.into_iter().map(|p| p.expect("all shards ran")).collect();
    Ok(shrink_report(sigma, power_iterations, epsilon, &partials))
}

/// One disagreement between the packed scorer and the dequantized oracle.
#[derive(Debug, Clone)]
pub struct IdentityViolation {
    pub dim: u32,
    pub depth: u32,
    pub trial: usize,
    pub segment: usize,
    pub scale_q: f32,
    pub scale_c: f32,
    pub hamming: u32,
    pub packed_term: f64,
    pub oracle_term: f64,
    pub ulps: u64,
}

impl std::fmt::Display for IdentityViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "d={} L={} trial={} segment={}: scales ({:e}, {:e}), hamming {}, \
             packed {:e} vs dequantized {:e} ({} ulps apart)",
            self.dim,
            self.depth,
            self.trial,
            self.segment,
            self.scale_q,
            self.scale_c,
            self.hamming,
            self.packed_term,
            self.oracle_term,
            self.ulps
        )
    }
}

#[derive(Debug, Clone)]
pub struct IdentityFuzzReport {
    pub trials: usize,
    pub terms_checked: u64,
    /// First few violations, capped so a broken build does not flood logs.
    pub violations: Vec<IdentityViolation>,
    pub violation_count: u64,
}

impl IdentityFuzzReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }
}

/// Maps a float onto a monotone integer line so ulp distance is a
/// subtraction. Adjacent representable floats differ by exactly 1.
fn monotone_bits(x: f64) -> i64 {
    let b = x.to_bits();
    if b >> 63 == 0 {
        b as i64
    } else {
        (b ^ 0x7fff_ffff_ffff_ffff) as i64
    }
}

pub fn ulp_distance(x: f64, y: f64) -> u64 {
    monotone_bits(x).wrapping_sub(monotone_bits(y)).unsigned_abs()
}

/// Fuzzes the scoring identity: for random codes and scales, every per-layer
/// term of the packed XOR/popcount scorer must match a float inner product
/// over the dequantized codes within one ulp. The oracle multiplies the
/// dequantized entries pairwise and sums exactly; all products share the
/// magnitude `scale_q * scale_c`, so the exact sum is the signed count times
/// that product, which isolates the identity from summation-order noise.
pub fn scoring_identity_fuzz(trials: usize, seed: u64) -> IdentityFuzzReport {
    let dims: [u32; 3] = [8, 64, 256];
    let depths: [u32; 3] = [0, 1, 2];
    let combos = dims.len() * depths.len();
    let mut rng = stream(seed, Stream::Sampling);
    let mut report = IdentityFuzzReport {
        trials: 0,
        terms_checked: 0,
        violations: Vec::new(),
        violation_count: 0,
    };
    for (i, (&dim, &depth)) in dims
        .iter()
        .flat_map(|d| depths.iter().map(move |l| (d, l)))
        .enumerate()
    {
        let mut quota = trials / combos;
        if i < trials % combos {
            quota += 1;
        }
        let segments = depth as usize + 1;
        let words = words_per_segment(dim as usize);
        let tail_mask = if (dim as usize).is_multiple_of(64) {
            u64::MAX
        } else {
            (1u64 << (dim as usize % 64)) - 1
        };
        for trial in 0..quota {
            let mut scales = Vec::with_capacity(2 * segments);
            let mut codes = Vec::with_capacity(2 * segments * words);
            for _ in 0..2 * segments {
                scales.push((rng.gen::<f64>() * 3.75 + 0.25) as f32);
                for w in 0..words {
                    let word: u64 = rng.gen();
                    codes.push(if w + 1 == words { word & tail_mask } else { word });
                }
            }
            let table = HashCodeTable::from_parts(2, dim, segments as u32, scales, codes)
                .expect("fuzz table shapes are consistent by construction");
            let query = QueryCode::from_table(&table, 0);
            let index = RetrievalIndex::from_table_range(&table, 1, 1);
            let mut term_sum = 0.0f64;
            for l in 0..segments {
                let h = hamming_distance(table.code(0, l), table.code(1, l))
                    .expect("equal widths by construction");
                let packed_term = (table.scale(0, l) as f64)
                    * (table.scale(1, l) as f64)
                    * (dim as f64 - 2.0 * h as f64);
                let oracle_term = dequantized_dot(&table.dequantize(0, l), &table.dequantize(1, l));
                report.terms_checked += 1;
                let ulps = ulp_distance(packed_term, oracle_term);
                if ulps > 1 {
                    report.violation_count += 1;
                    if report.violations.len() < 8 {
                        report.violations.push(IdentityViolation {
                            dim,
                            depth,
                            trial,
                            segment: l,
                            scale_q: table.scale(0, l),
                            scale_c: table.scale(1, l),
                            hamming: h,
                            packed_term,
                            oracle_term,
                            ulps,
                        });
                    }
                }
                term_sum += packed_term;
            }
            // The production scorer must reproduce the per-term sum bitwise;
            // both accumulate in ascending segment order.
            let scored = index.score(&query, 0);
            if scored.to_bits() != term_sum.to_bits() {
                report.violation_count += 1;
                if report.violations.len() < 8 {
                    report.violations.push(IdentityViolation {
                        dim,
                        depth,
                        trial,
                        segment: segments,
                        scale_q: 0.0,
                        scale_c: 0.0,
                        hamming: 0,
                        packed_term: scored,
                        oracle_term: term_sum,
                        ulps: ulp_distance(scored, term_sum),
                    });
                }
            }
            report.trials += 1;
        }
    }
    report
}

/// Inner product of two dequantized segments. Every elementwise product is
/// exact in f64 (both factors carry f32 precision) and shares one magnitude,
/// so the sum reduces to a signed count times that magnitude.
fn dequantized_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut signed_count = 0i64;
    let mut magnitude = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        magnitude = p.abs();
        signed_count += if p >= 0.0 { 1 } else { -1 };
    }
    magnitude * signed_count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use bgch_core::dispersion::validate_shrink_ordering_for_sigma;

    #[test]
    fn threaded_validator_matches_single_thread_bitwise() {
        let sigma: Vec<f64> = (1..=6).rev().map(|s| s as f64).collect();
        let single = validate_shrink_ordering_for_sigma(&sigma, 2, 0.5, 160, 9).unwrap();
        for threads in [1, 3, 16, 64] {
            let fanned = shrink_ordering_threaded(&sigma, 2, 0.5, 160, 9, threads).unwrap();
            assert_eq!(fanned, single, "threads={threads}");
        }
    }

    #[test]
    fn small_fuzz_run_is_clean() {
        let report = scoring_identity_fuzz(900, 7);
        assert_eq!(report.trials, 900);
        assert!(report.passed(), "violations: {:?}", report.violations);
        // 900 trials over 9 (d, L) combos, 100 each: depth 0 contributes one
        // term per trial, depth 1 two, depth 2 three, per three dims.
        assert_eq!(report.terms_checked, 3 * (100 + 200 + 300));
    }

    #[test]
    fn ulp_distance_handles_signs_and_adjacency() {
        assert_eq!(ulp_distance(1.0, 1.0), 0);
        assert_eq!(ulp_distance(1.0, f64::from_bits(1.0f64.to_bits() + 1)), 1);
        assert_eq!(ulp_distance(-1.0, f64::from_bits((-1.0f64).to_bits() + 1)), 1);
        assert!(ulp_distance(-1.0, 1.0) > 1_000_000);
    }
}
