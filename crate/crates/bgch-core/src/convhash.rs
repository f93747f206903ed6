//! Layer-wise graph convolution and binarization into a packed code table.
//!
//! Every propagation depth keeps its own hash segment: layer 0 is the
//! dispersed input, layer l+1 is one more smoothing round. Each segment
//! stores the row's sign pattern (packed, 64 coordinates per word) plus one
//! non-negative rescale factor, the mean absolute value of the row. That
//! factor is the least-squares-optimal scalar for reconstructing the row from
//! its signs, so `scale * signs` is the best rank-free binary sketch of the
//! embedding and dot products against it reduce to Hamming arithmetic.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::NormalizedAdjacency;
use crate::linalg::DenseMatrix;
use crate::{Error, Result};

/// Per-layer embeddings: `layers[0]` is the (dispersed) input, `layers[l+1]`
/// one propagation round further.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<DenseMatrix>,
}

impl LayerStack {
    /// Propagates `features` through `depth` convolution rounds.
    pub fn convolve(adj: &NormalizedAdjacency, features: DenseMatrix, depth: usize) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        layers.push(features);
        for _ in 0..depth {
            let next = adj.spmm(layers.last().expect("stack is never empty"));
            layers.push(next);
        }
        LayerStack { layers }
    }

    /// Wraps precomputed layers. All must share one shape and there must be
    /// at least one.
    #[cfg(test)]
    pub(crate) fn from_layers(layers: Vec<DenseMatrix>) -> Self {
        assert!(!layers.is_empty());
        assert!(layers
            .iter()
            .all(|m| m.rows() == layers[0].rows() && m.cols() == layers[0].cols()));
        LayerStack { layers }
    }

    /// Number of propagation rounds (segments are `depth() + 1`).
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn segments(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &DenseMatrix {
        &self.layers[l]
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn nodes(&self) -> usize {
        self.layers[0].rows()
    }
}

/// Sign pattern of a row as +-1 entries; zero maps to +1, NaN is an error.
pub fn sign_binarize(row: &[f64]) -> Result<Vec<i8>> {
    row.iter()
        .map(|&x| {
            if x.is_nan() {
                Err(Error::NanInput { context: "sign binarization" })
            } else if x >= 0.0 {
                Ok(1)
            } else {
                Ok(-1)
            }
        })
        .collect()
}

/// Mean absolute value of the row: the rescale factor attached to its sign
/// code. Always non-negative; zero exactly when the row is all zeros.
pub fn rescale_factor(row: &[f64]) -> f64 {
    crate::linalg::l1_norm(row) / row.len() as f64
}

/// 64-bit words needed for one `dim`-bit segment.
pub fn words_per_segment(dim: usize) -> usize {
    dim.div_ceil(64)
}

/// Packs the sign pattern of `row` into `out` (bit i of word i/64, LSB
/// first). Bits beyond `row.len()` stay zero.
pub fn pack_signs(row: &[f64], out: &mut [u64]) -> Result<()> {
    assert_eq!(out.len(), words_per_segment(row.len()));
    out.fill(0);
    for (i, &x) in row.iter().enumerate() {
        if x.is_nan() {
            return Err(Error::NanInput { context: "sign binarization" });
        }
        if x >= 0.0 {
            out[i / 64] |= 1u64 << (i % 64);
        }
    }
    Ok(())
}

/// Immutable per-node hash codes: one packed sign segment and one f32 scale
/// per propagation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HashCodeTable {
    nodes: usize,
    dim: u32,
    segments: u32,
    scales: Vec<f32>,
    codes: Vec<u64>,
}

impl HashCodeTable {
    /// Binarizes every layer of the stack. Scales are computed in f64 and
    /// stored at f32, which is also their serialized precision.
    pub fn build(stack: &LayerStack) -> Result<Self> {
        let nodes = stack.nodes();
        let dim = stack.dim();
        let segments = stack.segments();
        let words = words_per_segment(dim);
        let mut scales = vec![0.0f32; nodes * segments];
        let mut codes = vec![0u64; nodes * segments * words];
        for node in 0..nodes {
            for l in 0..segments {
                let row = stack.layer(l).row(node);
                let slot = node * segments + l;
                scales[slot] = rescale_factor(row) as f32;
                pack_signs(row, &mut codes[slot * words..(slot + 1) * words])?;
            }
        }
        Ok(HashCodeTable { nodes, dim: dim as u32, segments: segments as u32, scales, codes })
    }

    /// Builds a single-segment table from only the deepest layer.
    pub fn build_last_layer_only(stack: &LayerStack) -> Result<Self> {
        let last = LayerStack { layers: vec![stack.layer(stack.depth()).clone()] };
        Self::build(&last)
    }

    /// Assembles a table from raw parts (deserialization path).
    pub fn from_parts(
        nodes: usize,
        dim: u32,
        segments: u32,
        scales: Vec<f32>,
        codes: Vec<u64>,
    ) -> Result<Self> {
        let words = words_per_segment(dim as usize);
        if scales.len() != nodes * segments as usize {
            return Err(Error::DimensionMismatch {
                expected: nodes * segments as usize,
                got: scales.len(),
            });
        }
        if codes.len() != nodes * segments as usize * words {
            return Err(Error::DimensionMismatch {
                expected: nodes * segments as usize * words,
                got: codes.len(),
            });
        }
        Ok(HashCodeTable { nodes, dim, segments, scales, codes })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn segments(&self) -> u32 {
        self.segments
    }

    pub fn words_per_segment(&self) -> usize {
        words_per_segment(self.dim as usize)
    }

    pub fn scale(&self, node: usize, segment: usize) -> f32 {
        self.scales[node * self.segments as usize + segment]
    }

    pub fn code(&self, node: usize, segment: usize) -> &[u64] {
        let words = self.words_per_segment();
        let slot = node * self.segments as usize + segment;
        &self.codes[slot * words..(slot + 1) * words]
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn codes(&self) -> &[u64] {
        &self.codes
    }

    /// Forces every scale to 1 (the no-rescale ablation).
    pub fn force_unit_scales(&mut self) {
        self.scales.fill(1.0);
    }

    /// Overwrites scales (the learned-factor variant serializes its trained
    /// tensor this way). Length must match nodes * segments.
    pub fn set_scales(&mut self, scales: Vec<f32>) -> Result<()> {
        if scales.len() != self.scales.len() {
            return Err(Error::DimensionMismatch {
                expected: self.scales.len(),
                got: scales.len(),
            });
        }
        self.scales = scales;
        Ok(())
    }

    /// Reconstructs `scale * signs` for one segment as f64.
    pub fn dequantize(&self, node: usize, segment: usize) -> Vec<f64> {
        let alpha = self.scale(node, segment) as f64;
        let code = self.code(node, segment);
        (0..self.dim as usize)
            .map(|i| {
                if (code[i / 64] >> (i % 64)) & 1 == 1 {
                    alpha
                } else {
                    -alpha
                }
            })
            .collect()
    }
}

/// Space saving of the code table versus a full-precision f32 embedding
/// table: `32 d / (d + 32 (L + 1))` for `L + 1` segments of `d` bits plus one
/// 32-bit scale each.
pub fn theoretical_compression_ratio(dim: u32, depth: u32) -> f64 {
    let d = dim as f64;
    let segs = (depth + 1) as f64;
    32.0 * d / (d + 32.0 * segs)
}
