//! Bipartite interaction graph: construction, symmetric normalization, and
//! train/test edge splitting.
//!
//! The two partitions live in one unified index space: x-nodes keep their ids
//! `0..n1`, y-nodes are shifted to `n1..n1+n2`. The adjacency is therefore a
//! symmetric block-antidiagonal matrix and one CSR structure serves both
//! directions. Self-loops cannot be expressed at all, which is the point of
//! the encoding.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::linalg::DenseMatrix;
use crate::rng::{stream, Stream};
use crate::{Error, Result};

/// Undirected bipartite graph over partitions of size `n1` (x-nodes) and `n2`
/// (y-nodes). Edges are stored as sorted, deduplicated local `(x, y)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    n1: u32,
    n2: u32,
    edges: Vec<(u32, u32)>,
    /// CSR over the unified index space; column ids are unified too.
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
}

impl BipartiteGraph {
    /// Builds a graph from local edge pairs. Duplicate edges collapse to one;
    /// out-of-range endpoints are rejected; at least one edge is required.
    pub fn from_edges(n1: u32, n2: u32, mut edges: Vec<(u32, u32)>) -> Result<Self> {
        for &(x, y) in &edges {
            if x >= n1 {
                return Err(Error::NodeOutOfRange { node: x as u64, limit: n1 as u64 });
            }
            if y >= n2 {
                return Err(Error::NodeOutOfRange { node: y as u64, limit: n2 as u64 });
            }
        }
        edges.sort_unstable();
        let before = edges.len();
        edges.dedup();
        if edges.len() < before {
            log::debug!("collapsed {} duplicate edges", before - edges.len());
        }
        if edges.is_empty() {
            return Err(Error::EmptyGraph);
        }

        let n = n1 as usize + n2 as usize;
        let mut degree = vec![0usize; n];
        for &(x, y) in &edges {
            degree[x as usize] += 1;
            degree[n1 as usize + y as usize] += 1;
        }
        let mut row_ptr = vec![0usize; n + 1];
        for i in 0..n {
            row_ptr[i + 1] = row_ptr[i] + degree[i];
        }
        let mut cursor = row_ptr.clone();
        let mut col_idx = vec![0u32; 2 * edges.len()];
        // Edges are (x, y)-sorted, so each row fills in ascending column order.
        for &(x, y) in &edges {
            let yg = n1 + y;
            col_idx[cursor[x as usize]] = yg;
            cursor[x as usize] += 1;
            col_idx[cursor[yg as usize]] = x;
            cursor[yg as usize] += 1;
        }

        let isolated = degree.iter().filter(|&&d| d == 0).count();
        if isolated > 0 {
            log::info!("graph has {isolated} isolated nodes; they keep embeddings but never train");
        }

        Ok(BipartiteGraph { n1, n2, edges, row_ptr, col_idx })
    }

    pub fn n1(&self) -> u32 {
        self.n1
    }

    pub fn n2(&self) -> u32 {
        self.n2
    }

    /// Total node count across both partitions.
    pub fn node_count(&self) -> usize {
        self.n1 as usize + self.n2 as usize
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Unified id of y-node `y`.
    pub fn unified_y(&self, y: u32) -> u32 {
        self.n1 + y
    }

    /// Neighbors of a unified node id, themselves unified, ascending.
    pub fn neighbors(&self, node: u32) -> &[u32] {
        let node = node as usize;
        &self.col_idx[self.row_ptr[node]..self.row_ptr[node + 1]]
    }

    pub fn degree(&self, node: u32) -> usize {
        self.neighbors(node).len()
    }

    /// Unified ids of zero-degree nodes.
    pub fn isolated_nodes(&self) -> Vec<u32> {
        (0..self.node_count() as u32).filter(|&v| self.degree(v) == 0).collect()
    }

    /// |E| / (n1 * n2).
    pub fn density(&self) -> f64 {
        self.edges.len() as f64 / (self.n1 as f64 * self.n2 as f64)
    }

    /// Symmetrically normalized adjacency: entry (u, v) is
    /// 1 / sqrt(deg(u) * deg(v)). Rows of isolated nodes stay empty.
    pub fn normalize(&self) -> NormalizedAdjacency {
        let n = self.node_count();
        let mut values = Vec::with_capacity(self.col_idx.len());
        for u in 0..n {
            let du = self.degree(u as u32) as f64;
            for &v in self.neighbors(u as u32) {
                let dv = self.degree(v) as f64;
                values.push(1.0 / crate::math::sqrt(du * dv));
            }
        }
        NormalizedAdjacency {
            n,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values,
        }
    }

    /// Splits edges into train/test, stratified per x-node so every x that has
    /// any edge keeps at least one in train. Deterministic in `seed`.
    pub fn split(&self, test_ratio: f64, seed: u64) -> Result<DataSplit> {
        if !(0.0..1.0).contains(&test_ratio) {
            return Err(Error::InvalidConfig(format!(
                "test_ratio must be in [0, 1), got {test_ratio}"
            )));
        }
        let mut rng = stream(seed, Stream::Split);
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut test_by_x: BTreeMap<u32, Vec<u32>> = BTreeMap::new();

        let mut x_edges: Vec<u32> = Vec::new();
        for x in 0..self.n1 {
            x_edges.clear();
            x_edges.extend(self.neighbors(x).iter().map(|&yg| yg - self.n1));
            if x_edges.is_empty() {
                continue;
            }
            let deg = x_edges.len();
            let n_test = ((deg as f64 * test_ratio) as usize).min(deg - 1);
            if n_test == 0 {
                if deg == 1 && test_ratio > 0.0 {
                    log::debug!("x-node {x} has degree 1; its sole edge stays in train");
                }
                train.extend(x_edges.iter().map(|&y| (x, y)));
                continue;
            }
            x_edges.shuffle(&mut rng);
            let (held, kept) = x_edges.split_at(n_test);
            let mut held = held.to_vec();
            held.sort_unstable();
            test.extend(held.iter().map(|&y| (x, y)));
            test_by_x.insert(x, held);
            train.extend(kept.iter().map(|&y| (x, y)));
        }

        if train.is_empty() {
            return Err(Error::EmptyTrainSet);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok(DataSplit { train, test, test_by_x, test_ratio, seed })
    }
}

/// Outcome of [`BipartiteGraph::split`].
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    train: Vec<(u32, u32)>,
    test: Vec<(u32, u32)>,
    test_by_x: BTreeMap<u32, Vec<u32>>,
    test_ratio: f64,
    seed: u64,
}

impl DataSplit {
    pub fn train_edges(&self) -> &[(u32, u32)] {
        &self.train
    }

    pub fn test_edges(&self) -> &[(u32, u32)] {
        &self.test
    }

    /// Held-out y-nodes (local ids, ascending) for one x-node.
    pub fn held_out(&self, x: u32) -> &[u32] {
        self.test_by_x.get(&x).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// X-nodes that own at least one held-out edge, ascending.
    pub fn query_nodes(&self) -> impl Iterator<Item = u32> + '_ {
        self.test_by_x.keys().copied()
    }

    pub fn test_ratio(&self) -> f64 {
        self.test_ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Graph over the same node universe containing only train edges.
    pub fn train_graph(&self, n1: u32, n2: u32) -> Result<BipartiteGraph> {
        BipartiteGraph::from_edges(n1, n2, self.train.clone())
    }
}

/// Sparse symmetric matrix D^{-1/2} A D^{-1/2} in CSR form over the unified
/// index space.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries of one row as (unified column, value) pairs.
    pub fn row(&self, u: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.col_idx[self.row_ptr[u]..self.row_ptr[u + 1]]
            .iter()
            .copied()
            .zip(self.values[self.row_ptr[u]..self.row_ptr[u + 1]].iter().copied())
    }

    /// `self * dense`, the propagation step. O(nnz * cols).
    pub fn spmm(&self, dense: &DenseMatrix) -> DenseMatrix {
        assert_eq!(dense.rows(), self.n, "row count must match node count");
        let cols = dense.cols();
        let mut out = DenseMatrix::zeros(self.n, cols);
        for u in 0..self.n {
            let lo = self.row_ptr[u];
            let hi = self.row_ptr[u + 1];
            let out_row = out.row_mut(u);
            for k in lo..hi {
                let w = self.values[k];
                let src = dense.row(self.col_idx[k] as usize);
                for (o, s) in out_row.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        out
    }
}

/// Parses edge-list text: one edge per line, first two integer fields are the
/// raw x and y ids, extra fields are ignored. Fields split on tabs, commas, or
/// spaces. Lines that are blank or start with `#` are skipped. Raw ids are
/// densified to contiguous indices in first-seen order.
pub fn parse_edge_list(text: &str) -> Result<BipartiteGraph> {
    let mut x_ids: BTreeMap<u64, u32> = BTreeMap::new();
    let mut y_ids: BTreeMap<u64, u32> = BTreeMap::new();
    let mut x_next = 0u32;
    let mut y_next = 0u32;
    let mut edges = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields =
            line.split(|c: char| c == '\t' || c == ',' || c.is_whitespace()).filter(|f| !f.is_empty());
        let parse_field = |field: Option<&str>, what: &str| -> Result<u64> {
            let field = field.ok_or(Error::Parse {
                line: lineno + 1,
                reason: format!("missing {what} field"),
            })?;
            field.parse::<u64>().map_err(|_| Error::Parse {
                line: lineno + 1,
                reason: format!("{what} field {field:?} is not a non-negative integer"),
            })
        };
        let raw_x = parse_field(fields.next(), "x")?;
        let raw_y = parse_field(fields.next(), "y")?;
        let x = *x_ids.entry(raw_x).or_insert_with(|| {
            let id = x_next;
            x_next += 1;
            id
        });
        let y = *y_ids.entry(raw_y).or_insert_with(|| {
            let id = y_next;
            y_next += 1;
            id
        });
        edges.push((x, y));
    }

    if edges.is_empty() {
        return Err(Error::EmptyGraph);
    }
    if x_ids.len() > u32::MAX as usize || y_ids.len() > u32::MAX as usize {
        return Err(Error::InvalidConfig("more than u32::MAX distinct ids".to_string()));
    }
    BipartiteGraph::from_edges(x_next, y_next, edges)
}
