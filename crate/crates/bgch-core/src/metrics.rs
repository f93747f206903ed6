//! Ranking quality measures with binary relevance.

/// Fraction of the relevant set that appears in the first `n` ranked ids.
/// `relevant` must be sorted ascending. Empty relevant sets score zero.
pub fn recall_at(ranked: &[u32], relevant: &[u32], n: usize) -> f64 {
    debug_assert!(relevant.windows(2).all(|w| w[0] < w[1]));
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(n)
        .filter(|id| relevant.binary_search(id).is_ok())
        .count();
    hits as f64 / relevant.len() as f64
}

/// Normalized discounted cumulative gain at cutoff `n` with binary gains.
/// A relevant item at rank r (1-based) contributes 1/log2(r + 1); the ideal
/// ordering packs relevant items into the first ranks.
pub fn ndcg_at(ranked: &[u32], relevant: &[u32], n: usize) -> f64 {
    debug_assert!(relevant.windows(2).all(|w| w[0] < w[1]));
    if relevant.is_empty() || n == 0 {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, id)| relevant.binary_search(id).is_ok())
        .map(|(i, _)| discount(i))
        .sum();
    let ideal: f64 = (0..relevant.len().min(n)).map(discount).sum();
    dcg / ideal
}

#[inline]
fn discount(zero_based_rank: usize) -> f64 {
    1.0 / crate::math::log2((zero_based_rank + 2) as f64)
}

/// Mean of per-query metrics. Queries with no relevant items must not be
/// pushed; the caller filters them out of the query set instead.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricAccumulator {
    recall_sum: f64,
    ndcg_sum: f64,
    queries: usize,
}

/// Averaged retrieval quality over a query set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub recall: f64,
    pub ndcg: f64,
    pub queries: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, ranked: &[u32], relevant: &[u32], n: usize) {
        self.recall_sum += recall_at(ranked, relevant, n);
        self.ndcg_sum += ndcg_at(ranked, relevant, n);
        self.queries += 1;
    }

    pub fn finish(self) -> MetricSummary {
        let q = self.queries.max(1) as f64;
        MetricSummary {
            recall: self.recall_sum / q,
            ndcg: self.ndcg_sum / q,
            queries: self.queries,
        }
    }
}

/// Ranks ids by paired score descending, id ascending, for oracle use and
/// small evaluations that bypass the packed index.
pub fn rank_by_score(scored: &mut [(u32, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}
