//! Crate error type.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by graph construction, training, and retrieval.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Edge-list text could not be parsed. `line` is 1-based.
    Parse { line: usize, reason: String },
    /// The graph has no edges.
    EmptyGraph,
    /// A node id is outside its partition.
    NodeOutOfRange { node: u64, limit: u64 },
    /// Two operands disagree on a dimension that must match.
    DimensionMismatch { expected: usize, got: usize },
    /// Packed codes of different widths cannot be compared.
    WidthMismatch { left: usize, right: usize },
    /// Power iteration collapsed to the zero vector even after retries.
    DegenerateProjection,
    /// A configuration value violates its documented range.
    InvalidConfig(String),
    /// An input that must be a real number was NaN.
    NanInput { context: &'static str },
    /// A computed quantity stopped being finite.
    NonFinite { context: &'static str, node: Option<usize> },
    /// No training edges survived the split.
    EmptyTrainSet,
    /// The training loss became NaN.
    Diverged { epoch: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Parse { line, reason } => write!(f, "parse error at line {line}: {reason}"),
            Error::EmptyGraph => write!(f, "graph has no edges"),
            Error::NodeOutOfRange { node, limit } => {
                write!(f, "node id {node} out of range (partition size {limit})")
            }
            Error::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Error::WidthMismatch { left, right } => {
                write!(f, "code width mismatch: {left} vs {right} words")
            }
            Error::DegenerateProjection => {
                write!(f, "power iteration collapsed to zero after retries")
            }
            Error::InvalidConfig(reason) => write!(f, "invalid config: {reason}"),
            Error::NanInput { context } => write!(f, "NaN input in {context}"),
            Error::NonFinite { context, node } => match node {
                Some(n) => write!(f, "non-finite value in {context} at node {n}"),
                None => write!(f, "non-finite value in {context}"),
            },
            Error::EmptyTrainSet => write!(f, "no training edges after split"),
            Error::Diverged { epoch } => write!(f, "training loss became NaN at epoch {epoch}"),
        }
    }
}

impl core::error::Error for Error {}
