//! Round-trip and corruption tests for the binary containers and text
//! formats the pipeline reads and writes.

use bgch::io::{
    self, read_code_table, read_query_ids, write_code_table, write_graph_cache, Checkpoint,
    TABLE_HEADER_BYTES,
};
use bgch_core::convhash::{words_per_segment, HashCodeTable};
use bgch_core::linalg::DenseMatrix;
use bgch_core::rng::{stream, Stream};
use bgch_core::synthetic::planted_two_cluster;
use proptest::prelude::*;
use rand::Rng;
use tempfile::TempDir;

fn random_table(nodes: usize, dim: u32, segments: u32, seed: u64) -> HashCodeTable {
    let mut rng = stream(seed, Stream::Sampling);
    let words = words_per_segment(dim as usize);
    let tail_mask = if (dim as usize).is_multiple_of(64) {
        u64::MAX
    } else {
        (1u64 << (dim as usize % 64)) - 1
    };
    let mut scales = Vec::new();
    let mut codes = Vec::new();
    for _ in 0..nodes * segments as usize {
        scales.push(rng.gen::<f32>() + 0.1);
        for w in 0..words {
            let word: u64 = rng.gen();
            codes.push(if w + 1 == words { word & tail_mask } else { word });
        }
    }
    HashCodeTable::from_parts(nodes, dim, segments, scales, codes).unwrap()
}

#[test]
fn graph_cache_round_trips() {
    let dir = TempDir::new().unwrap();
    let graph = planted_two_cluster(12, 9, 0.7, 0.1, 5).unwrap();
    let path = dir.path().join("graph.bgrf");
    write_graph_cache(&path, &graph).unwrap();
    let loaded = io::load_graph(&path).unwrap();
    assert_eq!(loaded.n1(), graph.n1());
    assert_eq!(loaded.n2(), graph.n2());
    assert_eq!(loaded.edges(), graph.edges());
}

#[test]
fn text_edge_list_and_cache_load_identically() {
    let dir = TempDir::new().unwrap();
    // Raw ids are relabeled densely in first-appearance order, so this
    // listing maps onto itself: both sides introduce 0, 1, 2 in order.
    let text = "# comment line\n10 100\n10,200\n20\t100\n20 300\n30 200\n";
    let text_path = dir.path().join("edges.tsv");
    std::fs::write(&text_path, text).unwrap();
    let from_text = io::load_graph(&text_path).unwrap();
    assert_eq!(from_text.n1(), 3);
    assert_eq!(from_text.n2(), 3);
    assert_eq!(from_text.edges(), &[(0, 0), (0, 1), (1, 0), (1, 2), (2, 1)]);

    let cache_path = dir.path().join("edges.bgrf");
    write_graph_cache(&cache_path, &from_text).unwrap();
    let from_cache = io::load_graph(&cache_path).unwrap();
    assert_eq!(from_cache.edges(), from_text.edges());
    assert_eq!(from_cache.n1(), from_text.n1());
    assert_eq!(from_cache.n2(), from_text.n2());
}

#[test]
fn code_table_round_trips_bitwise() {
    let dir = TempDir::new().unwrap();
    for (nodes, dim, segments) in [(5usize, 64u32, 3u32), (3, 100, 1), (7, 8, 2)] {
        let table = random_table(nodes, dim, segments, 11 + u64::from(dim));
        let path = dir.path().join(format!("codes_{dim}_{segments}.bgch"));
        write_code_table(&path, &table).unwrap();
        let loaded = read_code_table(&path).unwrap();
        assert_eq!(loaded.nodes(), table.nodes());
        assert_eq!(loaded.dim(), table.dim());
        assert_eq!(loaded.segments(), table.segments());
        assert_eq!(loaded.codes(), table.codes());
        let same_bits = loaded
            .scales()
            .iter()
            .zip(table.scales())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits);
    }
}

#[test]
fn code_table_payload_matches_format_accounting() {
    let dir = TempDir::new().unwrap();
    let (nodes, dim, segments) = (6usize, 128u32, 3u32);
    let table = random_table(nodes, dim, segments, 3);
    let path = dir.path().join("codes.bgch");
    write_code_table(&path, &table).unwrap();
    let len = std::fs::metadata(&path).unwrap().len();
    let per_node = u64::from(segments) * (4 + words_per_segment(dim as usize) as u64 * 8);
    assert_eq!(len, TABLE_HEADER_BYTES + nodes as u64 * per_node);
}

#[test]
fn checkpoint_round_trips_exactly() {
    let dir = TempDir::new().unwrap();
    let (n1, n2, dim) = (4u32, 3u32, 6usize);
    let nodes = (n1 + n2) as usize;
    let mut rng = stream(17, Stream::Init);
    let mut fill = |scale: f64| {
        let mut m = DenseMatrix::zeros(nodes, dim);
        for x in m.as_mut_slice() {
            *x = scale * bgch_core::rng::normal(&mut rng);
        }
        m
    };
    let ckpt = Checkpoint {
        n1,
        n2,
        embeddings: fill(0.1),
        adam_m: fill(1e-3),
        adam_v: fill(1e-6),
        adam_t: 1234,
    };
    let path = dir.path().join("state.bgcp");
    io::write_checkpoint(&path, &ckpt).unwrap();
    let loaded = io::read_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);
}

#[test]
fn corrupted_containers_are_rejected() {
    let dir = TempDir::new().unwrap();
    let table = random_table(4, 64, 2, 21);
    let path = dir.path().join("codes.bgch");
    write_code_table(&path, &table).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let truncated = dir.path().join("truncated.bgch");
    std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_code_table(&truncated), Err(bgch::Error::Format { .. })));

    let trailing = dir.path().join("trailing.bgch");
    let mut extended = bytes.clone();
    extended.push(0);
    std::fs::write(&trailing, extended).unwrap();
    assert!(matches!(read_code_table(&trailing), Err(bgch::Error::Format { .. })));

    let wrong_magic = dir.path().join("wrong.bgch");
    let mut flipped = bytes;
    flipped[0] = b'X';
    std::fs::write(&wrong_magic, flipped).unwrap();
    assert!(matches!(read_code_table(&wrong_magic), Err(bgch::Error::Format { .. })));

    assert!(matches!(
        read_code_table(&dir.path().join("missing.bgch")),
        Err(bgch::Error::MissingInput(_))
    ));
}

#[test]
fn query_id_files_skip_blanks_and_comments() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("queries.txt");
    std::fs::write(&path, "# header\n3\n\n 14 \n0\n").unwrap();
    assert_eq!(read_query_ids(&path).unwrap(), vec![3, 14, 0]);

    std::fs::write(&path, "3\nnot-a-number\n").unwrap();
    assert!(matches!(read_query_ids(&path), Err(bgch::Error::Format { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_code_tables_round_trip(
        nodes in 1usize..6,
        dim in 1u32..130,
        segments in 1u32..4,
        seed in 0u64..1000,
    ) {
        let dir = TempDir::new().unwrap();
        let table = random_table(nodes, dim, segments, seed);
        let path = dir.path().join("t.bgch");
        write_code_table(&path, &table).unwrap();
        let loaded = read_code_table(&path).unwrap();
        prop_assert_eq!(loaded.codes(), table.codes());
        prop_assert_eq!(loaded.scales().len(), table.scales().len());
        prop_assert_eq!(loaded.dim(), table.dim());
    }

    #[test]
    fn prop_graph_caches_round_trip(n1 in 1u32..12, n2 in 1u32..12, seed in 0u64..500) {
        let graph = match planted_two_cluster(n1, n2, 0.6, 0.2, seed) {
            Ok(g) => g,
            // Sparse corners can come up empty; nothing to serialize then.
            Err(_) => return Ok(()),
        };
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("g.bgrf");
        write_graph_cache(&path, &graph).unwrap();
        let loaded = bgch::io::load_graph(&path).unwrap();
        prop_assert_eq!(loaded.edges(), graph.edges());
    }
}
