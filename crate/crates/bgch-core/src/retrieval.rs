//! Hamming-space scoring and top-N retrieval over packed code tables.
//!
//! A dot product between two rescaled sign codes collapses to
//! `scale_x * scale_y * (d - 2 * hamming)` per segment, summed over segments.
//! The scan is a straight XOR/popcount loop, scores accumulate in f64, and
//! ranking ties break toward the smaller candidate id so results are total
//! and reproducible.

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::convhash::HashCodeTable;
use crate::{Error, Result};

/// Number of differing bits between two equally wide packed codes.
pub fn hamming_distance(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::WidthMismatch { left: a.len(), right: b.len() });
    }
    Ok(hamming_unchecked(a, b))
}

#[inline]
pub(crate) fn hamming_unchecked(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// One node's codes and scales, detached from a table so queries can outlive
/// or come from outside the candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryCode {
    dim: u32,
    segments: u32,
    codes: Vec<u64>,
    scales: Vec<f32>,
}

impl QueryCode {
    pub fn from_table(table: &HashCodeTable, node: usize) -> Self {
        let segments = table.segments() as usize;
        let mut codes = Vec::with_capacity(segments * table.words_per_segment());
        let mut scales = Vec::with_capacity(segments);
        for l in 0..segments {
            codes.extend_from_slice(table.code(node, l));
            scales.push(table.scale(node, l));
        }
        QueryCode { dim: table.dim(), segments: table.segments(), codes, scales }
    }

    fn segment(&self, l: usize, words: usize) -> &[u64] {
        &self.codes[l * words..(l + 1) * words]
    }
}

/// Immutable scan target: per-segment banks of candidate codes and scales.
/// Candidate ids are positions within the range the index was built over.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    candidates: usize,
    dim: u32,
    segments: u32,
    words: usize,
    /// Layout: segment-major, then candidate, then word.
    codes: Vec<u64>,
    /// Layout: segment-major, then candidate.
    scales: Vec<f32>,
}

impl RetrievalIndex {
    /// Indexes every node of the table as a candidate.
    pub fn from_table(table: &HashCodeTable) -> Self {
        Self::from_table_range(table, 0, table.nodes())
    }

    /// Indexes the node range `[start, start + count)`. Candidate id c maps
    /// to table node `start + c`.
    pub fn from_table_range(table: &HashCodeTable, start: usize, count: usize) -> Self {
        assert!(start + count <= table.nodes(), "range exceeds table");
        let segments = table.segments() as usize;
        let words = table.words_per_segment();
        let mut codes = Vec::with_capacity(segments * count * words);
        let mut scales = Vec::with_capacity(segments * count);
        for l in 0..segments {
            for c in 0..count {
                codes.extend_from_slice(table.code(start + c, l));
                scales.push(table.scale(start + c, l));
            }
        }
        RetrievalIndex {
            candidates: count,
            dim: table.dim(),
            segments: table.segments(),
            words,
            codes,
            scales,
        }
    }

    pub fn candidates(&self) -> usize {
        self.candidates
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn segments(&self) -> u32 {
        self.segments
    }

    /// Hamming-form score between the query and one candidate:
    /// sum over segments of `scale_q * scale_c * (d - 2 * hamming)`.
    pub fn score(&self, query: &QueryCode, candidate: usize) -> f64 {
        debug_assert_eq!(query.dim, self.dim);
        debug_assert_eq!(query.segments, self.segments);
        let d = self.dim as f64;
        let mut total = 0.0f64;
        for l in 0..self.segments as usize {
            let bank = &self.codes[(l * self.candidates + candidate) * self.words..];
            let dist = hamming_unchecked(query.segment(l, self.words), &bank[..self.words]);
            let alpha_c = self.scales[l * self.candidates + candidate] as f64;
            let alpha_q = query.scales[l] as f64;
            total += alpha_q * alpha_c * (d - 2.0 * dist as f64);
        }
        total
    }

    /// Full linear scan returning the `n` best candidates as (id, score),
    /// best first, ties by ascending id. Candidates for which `excluded`
    /// returns true are skipped. Fewer than `n` survivors returns them all.
    pub fn top_n<F: Fn(u32) -> bool>(
        &self,
        query: &QueryCode,
        n: usize,
        excluded: F,
    ) -> Vec<(u32, f64)> {
        assert_eq!(query.dim, self.dim, "query width must match index");
        assert_eq!(query.segments, self.segments, "query segments must match index");
        if n == 0 {
            return Vec::new();
        }
        // Max-heap whose top is the worst kept entry, so the kept set (and
        // therefore the result) is independent of scan order.
        let mut heap: BinaryHeap<Entry> = BinaryHeap::with_capacity(n + 1);
        for c in 0..self.candidates as u32 {
            if excluded(c) {
                continue;
            }
            let entry = Entry { score: self.score(query, c as usize), id: c };
            if heap.len() < n {
                heap.push(entry);
            } else if entry.cmp(heap.peek().expect("heap is full")) == Ordering::Less {
                heap.pop();
                heap.push(entry);
            }
        }
        let mut kept: Vec<Entry> = heap.into_vec();
        kept.sort_unstable();
        kept.into_iter().map(|e| (e.id, e.score)).collect()
    }
}

/// Ranking entry ordered so that `Less` means better: higher score first,
/// then smaller id. Scores are finite by construction (scales and widths are
/// finite), so `total_cmp` is a plain tiebreak-safe comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    score: f64,
    id: u32,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
