//! Experiment drivers: multi-cutoff ranking evaluation, the ablation and
//! estimator comparison suites, and the storage audit of serialized tables.

use std::path::Path;
use std::thread;
use std::time::Instant;

use bgch_core::convhash::{theoretical_compression_ratio, HashCodeTable};
use bgch_core::estimators::EstimatorSpec;
use bgch_core::graph::{BipartiteGraph, DataSplit};
use bgch_core::metrics::{ndcg_at, recall_at};
use bgch_core::retrieval::{QueryCode, RetrievalIndex};
use bgch_core::training::{TrainConfig, Trainer};

use crate::config::{parse_ablation, ABLATION_NAMES};
use crate::error::{io_err, Error, Result};
use crate::io::TABLE_HEADER_BYTES;

/// Cutoffs reported by the standalone evaluator.
pub const REPORT_NS: [usize; 6] = [20, 50, 100, 200, 500, 1000];

#[derive(Debug, Clone)]
pub struct QueryMetrics {
    pub node: u32,
    /// Parallel to the report's cutoff list.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub ns: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub queries: usize,
    /// Fingerprint of the resolved config the evaluated table came from.
    pub fingerprint: String,
    pub per_query: Vec<QueryMetrics>,
}

/// Ranks the full candidate set once per query and reads metrics off at
/// every cutoff. Queries without held-out positives are skipped, not
/// zero-counted. Work is sharded over `threads` workers and merged in shard
/// order, so the report is identical for any worker count.
pub fn hamming_metric_report(
    table: &HashCodeTable,
    train_graph: &BipartiteGraph,
    split: &DataSplit,
    ns: &[usize],
    threads: usize,
    fingerprint: String,
) -> MetricReport {
    let n1 = train_graph.n1();
    let n2 = train_graph.n2();
    let index = RetrievalIndex::from_table_range(table, n1 as usize, n2 as usize);
    let queries: Vec<u32> = split.query_nodes().collect();
    let max_n = ns.iter().copied().max().unwrap_or(0).min(n2 as usize);

    let workers = threads.clamp(1, queries.len().max(1));
    let chunk = queries.len().div_ceil(workers);
    let mut per_query: Vec<QueryMetrics> = Vec::with_capacity(queries.len());
    thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for part in queries.chunks(chunk.max(1)) {
            let index = &index;
            handles.push(scope.spawn(move || {
                let mut out = Vec::with_capacity(part.len());
                for &x in part {
                    let held = split.held_out(x);
                    if held.is_empty() {
                        continue;
                    }
                    let query = QueryCode::from_table(table, x as usize);
                    let neighbors = train_graph.neighbors(x);
                    let ranked = index
                        .top_n(&query, max_n, |c| neighbors.binary_search(&(n1 + c)).is_ok());
                    let ids: Vec<u32> = ranked.iter().map(|(id, _)| *id).collect();
                    out.push(QueryMetrics {
                        node: x,
                        recall: ns.iter().map(|&n| recall_at(&ids, held, n)).collect(),
                        ndcg: ns.iter().map(|&n| ndcg_at(&ids, held, n)).collect(),
                    });
                }
                out
            }));
        }
        for handle in handles {
            per_query.extend(handle.join().expect("evaluation worker panicked"));
        }
    });

    let count = per_query.len().max(1) as f64;
    let mut recall = vec![0.0; ns.len()];
    let mut ndcg = vec![0.0; ns.len()];
    for q in &per_query {
        for i in 0..ns.len() {
            recall[i] += q.recall[i] / count;
            ndcg[i] += q.ndcg[i] / count;
        }
    }
    MetricReport {
        ns: ns.to_vec(),
        recall,
        ndcg,
        queries: per_query.len(),
        fingerprint,
        per_query,
    }
}

/// One trained variant in a comparison suite.
#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub label: String,
    pub recall: f64,
    pub ndcg: f64,
    pub loss_total: f64,
    pub epochs_run: usize,
    pub per_iter_ms: f64,
    pub failed: bool,
}

fn failed_row(label: &str) -> SuiteRow {
    SuiteRow {
        label: label.to_string(),
        recall: f64::NAN,
        ndcg: f64::NAN,
        loss_total: f64::NAN,
        epochs_run: 0,
        per_iter_ms: f64::NAN,
        failed: true,
    }
}

/// Trains one configuration to completion, timing the epoch loop. Steps per
/// epoch is the positive count over the batch size, rounded up.
fn train_row(
    label: &str,
    n1: u32,
    n2: u32,
    split: &DataSplit,
    cfg: TrainConfig,
) -> Result<SuiteRow> {
    let mut trainer = Trainer::new(n1, n2, split, cfg)?;
    let started = Instant::now();
    trainer.run()?;
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    let last = trainer
        .history()
        .last()
        .ok_or_else(|| Error::Validation(format!("{label}: no epochs ran")))?;
    let steps_per_epoch = split.train_edges().len().div_ceil(trainer.config().batch_size);
    let total_steps = (trainer.epochs_run() * steps_per_epoch).max(1);
    Ok(SuiteRow {
        label: label.to_string(),
        recall: last.recall,
        ndcg: last.ndcg,
        loss_total: last.loss_total,
        epochs_run: trainer.epochs_run(),
        per_iter_ms: elapsed_ms / total_steps as f64,
        failed: false,
    })
}

/// Trains the full model plus every single-switch variant under identical
/// seeds and budget: seven rows, full first. A diverging variant is marked
/// failed and the suite continues.
pub fn run_ablation_suite(
    n1: u32,
    n2: u32,
    split: &DataSplit,
    base: &TrainConfig,
) -> Vec<SuiteRow> {
    let mut rows = Vec::with_capacity(1 + ABLATION_NAMES.len());
    for label in std::iter::once("full").chain(ABLATION_NAMES) {
        let mut cfg = base.clone();
        cfg.ablations = parse_ablation(if label == "full" { "none" } else { label })
            .expect("suite labels are valid ablation names");
        match train_row(label, n1, n2, split, cfg) {
            Ok(row) => rows.push(row),
            Err(err) => {
                log::warn!("ablation {label} failed: {err}");
                rows.push(failed_row(label));
            }
        }
    }
    rows
}

/// Percentage delta against the suite's first (full) row, the comparison
/// format used for ablation tables.
pub fn delta_pct(value: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        f64::NAN
    } else {
        (value - baseline) / baseline * 100.0
    }
}

/// The estimator comparison grid: a harmonic-bound sweep for the Fourier
/// surrogate plus every alternative estimator at its default parameters.
pub fn estimator_grid(base: &TrainConfig) -> Vec<(String, EstimatorSpec)> {
    let half_period = match base.estimator {
        EstimatorSpec::Fourier { half_period, .. } => half_period,
        _ => 1.0,
    };
    let mut grid: Vec<(String, EstimatorSpec)> = [1u32, 3, 5, 7]
        .iter()
        .map(|&n| {
            (format!("fourier_n{n}"), EstimatorSpec::fourier(n, half_period, false))
        })
        .collect();
    grid.push(("ste".into(), EstimatorSpec::Ste { clip: 1.0 }));
    grid.push(("tanh".into(), EstimatorSpec::Tanh { temperature: 1.0 }));
    grid.push(("sigmoid".into(), EstimatorSpec::Sigmoid { temperature: 1.0 }));
    grid.push(("signswish".into(), EstimatorSpec::SignSwish { beta: 5.0 }));
    grid
}

/// One trained run per estimator under identical seeds and budget,
/// reporting final metrics and per-iteration training time.
pub fn run_estimator_suite(
    n1: u32,
    n2: u32,
    split: &DataSplit,
    base: &TrainConfig,
    grid: &[(String, EstimatorSpec)],
) -> Vec<SuiteRow> {
    let mut rows = Vec::with_capacity(grid.len());
    for (label, spec) in grid {
        let mut cfg = base.clone();
        cfg.estimator = *spec;
        match train_row(label, n1, n2, split, cfg) {
            Ok(row) => rows.push(row),
            Err(err) => {
                log::warn!("estimator {label} failed: {err}");
                rows.push(failed_row(label));
            }
        }
    }
    rows
}

/// Storage accounting for a serialized code table.
#[derive(Debug, Clone)]
pub struct SpaceAudit {
    pub nodes: u64,
    pub dim: u32,
    pub depth: u32,
    /// Serialized payload bits per node, measured from the file size.
    pub measured_bits_per_node: u64,
    /// Scales plus code bits per node before word padding.
    pub nominal_bits_per_node: u64,
    /// Idealized compression ratio for this width and depth.
    pub theoretical_ratio: f64,
    /// Measured payload against a float32 table of the same total code
    /// width, (L+1)*d floats per node.
    pub measured_ratio: f64,
    pub file_bytes: u64,
    pub header_overhead_pct: f64,
}

pub fn space_audit(path: &Path) -> Result<SpaceAudit> {
    let table = crate::io::read_code_table(path)?;
    let file_bytes = std::fs::metadata(path).map_err(io_err(path))?.len();
    let nodes = table.nodes() as u64;
    if nodes == 0 {
        return Err(Error::Validation("cannot audit an empty code table".into()));
    }
    let payload_bits = (file_bytes - TABLE_HEADER_BYTES) * 8;
    if !payload_bits.is_multiple_of(nodes) {
        return Err(Error::Validation(format!(
            "payload of {payload_bits} bits does not divide over {nodes} nodes"
        )));
    }
    let dim = table.dim();
    let depth = table.segments() - 1;
    let segments = u64::from(table.segments());
    let measured = payload_bits / nodes;
    let float_reference = 32 * u64::from(dim) * segments;
    Ok(SpaceAudit {
        nodes,
        dim,
        depth,
        measured_bits_per_node: measured,
        nominal_bits_per_node: segments * (u64::from(dim) + 32),
        theoretical_ratio: theoretical_compression_ratio(dim, depth),
        measured_ratio: float_reference as f64 / measured as f64,
        file_bytes,
        header_overhead_pct: TABLE_HEADER_BYTES as f64 / file_bytes as f64 * 100.0,
    })
}

/// Renders rows as an aligned text table: every column padded to its widest
/// cell, two spaces between columns.
#[allow(clippy::needless_range_loop)]
pub fn align_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let mut render = |cells: &[String]| {
        for i in 0..cols {
            let cell = cells.get(i).map(String::as_str).unwrap_or("");
            if i > 0 {
                out.push_str("  ");
            }
            if i + 1 == cols {
                out.push_str(cell);
            } else {
                out.push_str(&format!("{cell:<width$}", width = widths[i]));
            }
        }
        out.push('\n');
    };
    render(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    for row in rows {
        render(row);
    }
    out
}
