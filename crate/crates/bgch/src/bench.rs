//! Matching-speed benchmark: XOR/popcount scoring against a float
//! dot-product scan over the same candidates, single-threaded, with ranking
//! equality asserted before any timing is reported.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use bgch_core::convhash::{words_per_segment, HashCodeTable};
use bgch_core::retrieval::{QueryCode, RetrievalIndex};
use bgch_core::rng::{stream, Stream};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub candidates: usize,
    pub dim: u32,
    pub depth: u32,
    pub queries: usize,
    pub top_n: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(candidates: usize, dim: u32, depth: u32) -> Self {
        BenchConfig { candidates, dim, depth, queries: 200, top_n: 100, seed: 42 }
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub candidates: usize,
    pub dim: u32,
    pub depth: u32,
    pub queries: usize,
    pub top_n: usize,
    pub hamming_mean_ms: f64,
    pub hamming_p99_ms: f64,
    pub float_mean_ms: f64,
    pub float_p99_ms: f64,
    /// float mean over hamming mean.
    pub speedup_mean: f64,
    pub speedup_p99: f64,
}

/// Synthetic code table plus the float bank the baseline scans: candidate
/// rows of (L+1)*d dequantized f32 values, query node first. Scales are
/// drawn from the lattice {1..16}/16 so every score in both paths is exact
/// in f64 and the ranking-equality assertion cannot trip on rounding.
struct BenchData {
    table: HashCodeTable,
    floats: Vec<f32>,
    row_len: usize,
    queries: usize,
}

fn build_data(cfg: &BenchConfig) -> BenchData {
    let mut rng = stream(cfg.seed, Stream::Sampling);
    let segments = cfg.depth as usize + 1;
    let words = words_per_segment(cfg.dim as usize);
    let tail_mask = if (cfg.dim as usize).is_multiple_of(64) {
        u64::MAX
    } else {
        (1u64 << (cfg.dim as usize % 64)) - 1
    };
    let nodes = cfg.queries + cfg.candidates;
    let mut scales = Vec::with_capacity(nodes * segments);
    let mut codes = Vec::with_capacity(nodes * segments * words);
    for _ in 0..nodes * segments {
        scales.push((1 + rng.gen::<u32>() % 16) as f32 / 16.0);
        for w in 0..words {
            let word: u64 = rng.gen();
            codes.push(if w + 1 == words { word & tail_mask } else { word });
        }
    }
    let table = HashCodeTable::from_parts(nodes, cfg.dim, segments as u32, scales, codes)
        .expect("bench table shapes are consistent by construction");
    let row_len = segments * cfg.dim as usize;
    let mut floats = Vec::with_capacity(nodes * row_len);
    for node in 0..nodes {
        for l in 0..segments {
            floats.extend(table.dequantize(node, l).iter().map(|&x| x as f32));
        }
    }
    BenchData { table, floats, row_len, queries: cfg.queries }
}

impl BenchData {
    fn float_row(&self, node: usize) -> &[f32] {
        &self.floats[node * self.row_len..(node + 1) * self.row_len]
    }

    /// Candidate `c` lives at node `queries + c`.
    fn candidate_row(&self, c: usize) -> &[f32] {
        self.float_row(self.queries + c)
    }
}

/// Products are f32-exact on the scale lattice and partial sums stay on a
/// 1/256 grid well inside f64's integer range, so this dot is exact.
fn float_score(q: &[f32], c: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (a, b) in q.iter().zip(c) {
        acc += f64::from(*a) * f64::from(*b);
    }
    acc
}

/// Selection entry ordered worst-first so the heap peek is the eviction
/// candidate: lower score is greater, ties broken toward higher id.
#[derive(PartialEq)]
struct Worst {
    score: f64,
    id: u32,
}

impl Eq for Worst {}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn float_top_n(data: &BenchData, query: usize, n: usize) -> Vec<(u32, f64)> {
    let q = data.float_row(query);
    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(n + 1);
    for c in 0..data.table.nodes() - data.queries {
        let score = float_score(q, data.candidate_row(c));
        if heap.len() < n {
            heap.push(Worst { score, id: c as u32 });
        } else if let Some(w) = heap.peek() {
            if score > w.score || (score == w.score && (c as u32) < w.id) {
                heap.pop();
                heap.push(Worst { score, id: c as u32 });
            }
        }
    }
    let mut out: Vec<(u32, f64)> = heap.into_iter().map(|w| (w.id, w.score)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

fn full_ranking(mut scored: Vec<(u32, f64)>) -> Vec<u32> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.into_iter().map(|(id, _)| id).collect()
}

fn percentile_ms(sorted: &[Duration], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let idx = ((sorted.len() as f64 * p).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx].as_secs_f64() * 1e3
}

/// Runs the benchmark: builds synthetic codes, asserts that both scorers
/// produce identical full rankings on every query, then times Top-N
/// retrieval per query through each path.
pub fn bench_matching(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.candidates == 0 || cfg.queries == 0 || cfg.top_n == 0 {
        return Err(Error::Usage("bench needs candidates, queries, and top-n > 0".into()));
    }
    let data = build_data(cfg);
    let index = RetrievalIndex::from_table_range(&data.table, cfg.queries, cfg.candidates);

    for q in 0..cfg.queries {
        let query = QueryCode::from_table(&data.table, q);
        let hamming: Vec<(u32, f64)> =
            (0..cfg.candidates).map(|c| (c as u32, index.score(&query, c))).collect();
        let floats: Vec<(u32, f64)> = (0..cfg.candidates)
            .map(|c| (c as u32, float_score(data.float_row(q), data.candidate_row(c))))
            .collect();
        if full_ranking(hamming) != full_ranking(floats) {
            return Err(Error::Validation(format!(
                "query {q}: hamming and float paths rank candidates differently"
            )));
        }
    }

    let n = cfg.top_n.min(cfg.candidates);
    let mut hamming_times = Vec::with_capacity(cfg.queries);
    for q in 0..cfg.queries {
        let query = QueryCode::from_table(&data.table, q);
        let started = Instant::now();
        let out = index.top_n(&query, n, |_| false);
        hamming_times.push(started.elapsed());
        std::hint::black_box(out);
    }
    let mut float_times = Vec::with_capacity(cfg.queries);
    for q in 0..cfg.queries {
        let started = Instant::now();
        let out = float_top_n(&data, q, n);
        float_times.push(started.elapsed());
        std::hint::black_box(out);
    }

    let mean_ms = |times: &[Duration]| {
        times.iter().map(|t| t.as_secs_f64()).sum::<f64>() / times.len() as f64 * 1e3
    };
    let hamming_mean_ms = mean_ms(&hamming_times);
    let float_mean_ms = mean_ms(&float_times);
    hamming_times.sort();
    float_times.sort();
    let hamming_p99_ms = percentile_ms(&hamming_times, 0.99);
    let float_p99_ms = percentile_ms(&float_times, 0.99);
    Ok(BenchReport {
        candidates: cfg.candidates,
        dim: cfg.dim,
        depth: cfg.depth,
        queries: cfg.queries,
        top_n: n,
        hamming_mean_ms,
        hamming_p99_ms,
        float_mean_ms,
        float_p99_ms,
        speedup_mean: float_mean_ms / hamming_mean_ms,
        speedup_p99: float_p99_ms / hamming_p99_ms,
    })
}
