//! Hash-based embedding of bipartite graphs for Hamming-space top-N retrieval.
//!
//! The pipeline trains real-valued node embeddings on a bipartite interaction
//! graph, disperses them along their dominant projection direction, runs them
//! through parameter-free graph convolutions, and binarizes every intermediate
//! layer into sign codes with one non-negative rescale factor per node per
//! layer. Scoring between two nodes then reduces to XOR/popcount arithmetic
//! plus a handful of float multiplies, which is what makes the codes cheap to
//! match at query time.
//!
//! This crate is `no_std` (with `alloc`) and holds the algorithmic surface:
//! graph representation and normalization, feature dispersion, convolution and
//! binarization, gradient estimators for the sign function, the training loop,
//! the Hamming retrieval kernels, and ranking metrics. File formats, the CLI,
//! and anything that needs a clock or a filesystem live in the companion
//! `bgch` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
#[macro_use]
extern crate std;

pub mod convhash;
pub mod dispersion;
pub mod error;
pub mod estimators;
pub mod graph;
pub mod linalg;
pub mod math;
pub mod metrics;
#[cfg(test)]
pub(crate) mod oracle;
pub mod retrieval;
pub mod rng;
pub mod synthetic;
pub mod training;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
