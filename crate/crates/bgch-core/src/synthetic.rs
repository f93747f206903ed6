//! Seeded graph generators for experiments and test fixtures.

use alloc::vec::Vec;
use rand::Rng;

use crate::graph::BipartiteGraph;
use crate::rng::{stream, Stream};
use crate::{Error, Result};

/// Random bipartite graph with two planted co-clusters: the first halves of
/// both sides form one community, the second halves the other. Edges appear
/// independently with probability `p_in` inside a community and `p_out`
/// across. Deterministic in `seed`.
pub fn planted_two_cluster(
    n1: u32,
    n2: u32,
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> Result<BipartiteGraph> {
    for (name, p) in [("p_in", p_in), ("p_out", p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(alloc::format!(
                "{name} must lie in [0, 1], got {p}"
            )));
        }
    }
    let mut rng = stream(seed, Stream::Sampling);
    let mut edges = Vec::new();
    for x in 0..n1 {
        for y in 0..n2 {
            let same = (x < n1 / 2) == (y < n2 / 2);
            let p = if same { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                edges.push((x, y));
            }
        }
    }
    BipartiteGraph::from_edges(n1, n2, edges)
}
