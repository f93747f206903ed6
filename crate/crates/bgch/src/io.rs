//! File formats: edge lists, the "BGRF" graph cache, the "BGCH" code table,
//! and the "BGCP" training checkpoint. All binary containers are versioned,
//! magic-tagged, and little-endian.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use bgch_core::convhash::{words_per_segment, HashCodeTable};
use bgch_core::graph::{parse_edge_list, BipartiteGraph};
use bgch_core::linalg::DenseMatrix;

use crate::error::{io_err, Error, Result};

pub const GRAPH_MAGIC: &[u8; 4] = b"BGRF";
pub const TABLE_MAGIC: &[u8; 4] = b"BGCH";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BGCP";
pub const FORMAT_VERSION: u16 = 1;

/// Checkpointed training state: embeddings plus Adam moments. The factor
/// tensor of the learnable-scale ablation is intentionally not stored; a
/// resumed trainer re-derives it from the embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub n1: u32,
    pub n2: u32,
    pub embeddings: DenseMatrix,
    pub adam_m: DenseMatrix,
    pub adam_v: DenseMatrix,
    pub adam_t: u64,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

/// Fails with the usage exit class when an input path does not exist, naming
/// the path. Run before any real work so bad invocations die early.
pub fn require_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

/// Loads a graph from either format, sniffing the cache magic first so a
/// `.bgrf` cache and a text edge list are interchangeable at every flag.
pub fn load_graph(path: &Path) -> Result<BipartiteGraph> {
    require_input(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() >= 4 && &bytes[..4] == GRAPH_MAGIC {
        decode_graph_cache(path, &bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| format_err(path, "edge list is not valid UTF-8"))?;
        parse_edge_list(text).map_err(Error::Core)
    }
}

pub fn write_graph_cache(path: &Path, graph: &BipartiteGraph) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut out = || -> std::io::Result<()> {
        w.write_all(GRAPH_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&u64::from(graph.n1()).to_le_bytes())?;
        w.write_all(&u64::from(graph.n2()).to_le_bytes())?;
        w.write_all(&(graph.edge_count() as u64).to_le_bytes())?;
        for &(x, y) in graph.edges() {
            w.write_all(&x.to_le_bytes())?;
            w.write_all(&y.to_le_bytes())?;
        }
        w.flush()
    };
    out().map_err(io_err(path))
}

fn decode_graph_cache(path: &Path, bytes: &[u8]) -> Result<BipartiteGraph> {
    let mut r = Cursor::new(path, &bytes[4..]);
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported graph cache version {version}")));
    }
    let n1 = r.node_count()?;
    let n2 = r.node_count()?;
    let m = r.u64()? as usize;
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        edges.push((r.u32()?, r.u32()?));
    }
    r.finish()?;
    BipartiteGraph::from_edges(n1, n2, edges).map_err(Error::Core)
}

pub fn write_code_table(path: &Path, table: &HashCodeTable) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let nodes = table.nodes();
    let segments = table.segments() as usize;
    let words = table.words_per_segment();
    let mut out = || -> std::io::Result<()> {
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(nodes as u64).to_le_bytes())?;
        w.write_all(&table.dim().to_le_bytes())?;
        // The depth field stores L; the file carries L + 1 segments per node.
        w.write_all(&(table.segments() - 1).to_le_bytes())?;
        for node in 0..nodes {
            let scale_base = node * segments;
            for &s in &table.scales()[scale_base..scale_base + segments] {
                w.write_all(&s.to_le_bytes())?;
            }
            let code_base = node * segments * words;
            for &word in &table.codes()[code_base..code_base + segments * words] {
                w.write_all(&word.to_le_bytes())?;
            }
        }
        w.flush()
    };
    out().map_err(io_err(path))
}

pub fn read_code_table(path: &Path) -> Result<HashCodeTable> {
    require_input(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 4 || &bytes[..4] != TABLE_MAGIC {
        return Err(format_err(path, "not a code-table file (bad magic)"));
    }
    let mut r = Cursor::new(path, &bytes[4..]);
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported code-table version {version}")));
    }
    let nodes = r.u64()? as usize;
    let dim = r.u32()?;
    let depth = r.u32()?;
    if dim == 0 {
        return Err(format_err(path, "code table has zero width"));
    }
    let segments = depth as usize + 1;
    let words = words_per_segment(dim as usize);
    let mut scales = vec![0.0f32; nodes * segments];
    let mut codes = vec![0u64; nodes * segments * words];
    for node in 0..nodes {
        for s in 0..segments {
            scales[node * segments + s] = r.f32()?;
        }
        for w in 0..segments * words {
            codes[node * segments * words + w] = r.u64()?;
        }
    }
    r.finish()?;
    HashCodeTable::from_parts(nodes, dim, segments as u32, scales, codes).map_err(Error::Core)
}

/// Header bytes preceding the per-node payload of a code-table file: magic,
/// version, node count, width, depth.
pub const TABLE_HEADER_BYTES: u64 = 4 + 2 + 8 + 4 + 4;

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut out = || -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&u64::from(ckpt.n1).to_le_bytes())?;
        w.write_all(&u64::from(ckpt.n2).to_le_bytes())?;
        w.write_all(&(ckpt.embeddings.cols() as u32).to_le_bytes())?;
        w.write_all(&ckpt.adam_t.to_le_bytes())?;
        for m in [&ckpt.embeddings, &ckpt.adam_m, &ckpt.adam_v] {
            for &x in m.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    };
    out().map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    require_input(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err(path, "not a checkpoint file (bad magic)"));
    }
    let mut r = Cursor::new(path, &bytes[4..]);
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported checkpoint version {version}")));
    }
    let n1 = r.node_count()?;
    let n2 = r.node_count()?;
    let dim = r.u32()? as usize;
    let adam_t = r.u64()?;
    let nodes = n1 as usize + n2 as usize;
    let read_matrix = |r: &mut Cursor| -> Result<DenseMatrix> {
        let mut data = Vec::with_capacity(nodes * dim);
        for _ in 0..nodes * dim {
            data.push(r.f64()?);
        }
        Ok(DenseMatrix::from_vec(nodes, dim, data))
    };
    let embeddings = read_matrix(&mut r)?;
    let adam_m = read_matrix(&mut r)?;
    let adam_v = read_matrix(&mut r)?;
    r.finish()?;
    Ok(Checkpoint { n1, n2, embeddings, adam_m, adam_v, adam_t })
}

/// Writes a text artifact, creating parent directories as needed.
pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(path))?;
        }
    }
    fs::write(path, content).map_err(io_err(path))
}

/// Bounds-checked little-endian reader over a byte slice.
struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Cursor { path, bytes, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(format_err(self.path, "file truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Node counts are serialized as u64 but must fit the u32 id space.
    fn node_count(&mut self) -> Result<u32> {
        let raw = self.u64()?;
        u32::try_from(raw)
            .map_err(|_| format_err(self.path, format!("node count {raw} exceeds id space")))
    }

    fn finish(self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(format_err(self.path, "trailing bytes after payload"))
        }
    }
}

/// Reads query ids from a batch file: one id per line, blank lines and
/// '#'-comments skipped.
pub fn read_query_ids(path: &Path) -> Result<Vec<u64>> {
    require_input(path)?;
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut text = String::new();
    BufReader::new(file).read_to_string(&mut text).map_err(io_err(path))?;
    let mut ids = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id: u64 = line.parse().map_err(|_| {
            format_err(path, format!("line {}: expected a node id, got {line:?}", lineno + 1))
        })?;
        ids.push(id);
    }
    Ok(ids)
}
