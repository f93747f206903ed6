//! Subcommand drivers. Each one resolves its inputs, runs the corresponding
//! pipeline operation, writes artifacts plus a manifest when given an output
//! directory, and prints a human-readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use bgch_core::convhash::HashCodeTable;
use bgch_core::graph::BipartiteGraph;
use bgch_core::retrieval::{QueryCode, RetrievalIndex};
use bgch_core::training::{evaluate_hamming, LossKind, Trainer};

use crate::bench::{bench_matching, BenchConfig};
use crate::cli::{
    AblateArgs, BenchArgs, EstimatorsArgs, EvalArgs, LandscapeArgs, QueryArgs, TrainArgs,
    ValidateArgs,
};
use crate::config::{resolve, FileConfig, Overrides, ResolvedConfig};
use crate::error::{Error, Result};
use crate::experiments::{
    align_table, delta_pct, estimator_grid, hamming_metric_report, run_ablation_suite,
    run_estimator_suite, SuiteRow, REPORT_NS,
};
use crate::io;
use crate::manifest::RunManifest;
use crate::validate::{shrink_ordering_threaded, scoring_identity_fuzz};

/// Effective worker count: the flag caps it, and sharded modules never gain
/// from more workers than the host offers.
fn thread_count(flag: Option<usize>) -> usize {
    let available = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    flag.unwrap_or(available).clamp(1, 64)
}

/// Loads the config file if given and folds in the flag overrides.
fn resolve_config(path: Option<&PathBuf>, overrides: &Overrides) -> Result<ResolvedConfig> {
    let file = match path {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    resolve(&file, overrides)
}

/// Rounds a duration to the metrics CSV's wall-clock column format.
fn wall_ms(started: Instant) -> String {
    format!("{:.3}", started.elapsed().as_secs_f64() * 1e3)
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let resolved = resolve_config(args.hyper.config.as_ref(), &args.hyper.overrides())?;
    io::require_input(&args.edges)?;
    let graph = io::load_graph(&args.edges)?;
    let cfg = resolved.train.clone();
    let split = graph.split(resolved.test_ratio, cfg.seed)?;
    let mut trainer = Trainer::new(graph.n1(), graph.n2(), &split, cfg.clone())?;

    let top_n = cfg.eval_top_n;
    let mut csv = format!(
        "epoch,loss_rec,loss_bpr,loss_total,recall@{top_n},ndcg@{top_n},wall_ms\n"
    );
    while trainer.epochs_run() < cfg.epochs && !trainer.should_stop() {
        let started = Instant::now();
        let report = trainer.epoch()?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            report.epoch + 1,
            report.loss_rec,
            report.loss_bpr,
            report.loss_total,
            report.recall,
            report.ndcg,
            wall_ms(started)
        );
        log::info!(
            "epoch {}/{}: loss {:.6}, recall@{top_n} {:.4}",
            report.epoch + 1,
            cfg.epochs,
            report.loss_total,
            report.recall
        );
    }
    let table = trainer.code_table()?;
    let (adam_m, adam_v, adam_t) = trainer.adam_state();
    let checkpoint = io::Checkpoint {
        n1: graph.n1(),
        n2: graph.n2(),
        embeddings: trainer.embeddings().clone(),
        adam_m: adam_m.clone(),
        adam_v: adam_v.clone(),
        adam_t,
    };

    std::fs::create_dir_all(&args.out).map_err(crate::error::io_err(&args.out))?;
    io::write_code_table(&args.out.join("codes.bgch"), &table)?;
    io::write_checkpoint(&args.out.join("checkpoint.bgcp"), &checkpoint)?;
    io::write_text(&args.out.join("metrics.csv"), &csv)?;

    let mut manifest = RunManifest::new("train", cfg.seed).with_config(resolved.snapshot());
    manifest.record_input(&args.edges)?;
    if let Some(config_path) = &args.hyper.config {
        manifest.record_input(config_path)?;
    }
    manifest.record_artifact("codes", "codes.bgch");
    manifest.record_artifact("checkpoint", "checkpoint.bgcp");
    manifest.record_artifact("metrics", "metrics.csv");
    manifest.write(&args.out)?;

    let last = trainer.history().last().expect("at least one epoch ran");
    println!(
        "trained {} epochs; final loss {:.6}, recall@{top_n} {:.4}, ndcg@{top_n} {:.4}",
        trainer.epochs_run(),
        last.loss_total,
        last.recall,
        last.ndcg
    );
    println!("artifacts written to {}", args.out.display());
    Ok(())
}

/// One query's TSV rows, or a comment line explaining why it has none.
fn query_block(
    table: &HashCodeTable,
    index: &RetrievalIndex,
    graph: Option<&BipartiteGraph>,
    id: u64,
    n: usize,
) -> String {
    // With a graph, queries address the user side and candidates are items;
    // without one, any node can query against all the others.
    let valid_limit = match graph {
        Some(g) => u64::from(g.n1()),
        None => table.nodes() as u64,
    };
    if id >= valid_limit {
        log::warn!("query {id}: unknown node id (valid ids are 0..{valid_limit})");
        return format!("# error query {id}: unknown node id (valid ids are 0..{valid_limit})\n");
    }
    let query = QueryCode::from_table(table, id as usize);
    if n > index.candidates() {
        log::warn!(
            "query {id}: asked for top {n} of {} candidates; returning all",
            index.candidates()
        );
    }
    let ranked = match graph {
        Some(g) => {
            let n1 = g.n1();
            let neighbors = g.neighbors(id as u32);
            index.top_n(&query, n, |c| neighbors.binary_search(&(n1 + c)).is_ok())
        }
        None => index.top_n(&query, n, |c| u64::from(c) == id),
    };
    let mut block = String::new();
    for (rank, (candidate, score)) in ranked.iter().enumerate() {
        let _ = writeln!(block, "{id}\t{}\t{candidate}\t{score}", rank + 1);
    }
    block
}

pub fn run_query(args: &QueryArgs) -> Result<()> {
    io::require_input(&args.codes)?;
    let table = io::read_code_table(&args.codes)?;
    let graph = match &args.edges {
        Some(path) => Some(io::load_graph(path)?),
        None => None,
    };
    let mut ids = args.node.clone();
    if let Some(batch) = &args.queries {
        ids.extend(io::read_query_ids(batch)?);
    }
    if ids.is_empty() {
        return Err(Error::Usage("no queries given; use --node or --queries".into()));
    }
    if let Some(g) = &graph {
        if g.node_count() != table.nodes() {
            return Err(Error::Validation(format!(
                "code table has {} nodes but the graph has {}",
                table.nodes(),
                g.node_count()
            )));
        }
    }
    let index = match &graph {
        Some(g) => RetrievalIndex::from_table_range(&table, g.n1() as usize, g.n2() as usize),
        None => RetrievalIndex::from_table(&table),
    };

    let workers = thread_count(args.threads).min(ids.len());
    let chunk = ids.len().div_ceil(workers);
    let started = Instant::now();
    let mut body = String::new();
    thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for part in ids.chunks(chunk) {
            let table = &table;
            let index = &index;
            let graph = graph.as_ref();
            handles.push(scope.spawn(move || {
                let mut out = String::new();
                for &id in part {
                    out.push_str(&query_block(table, index, graph, id, args.n));
                }
                out
            }));
        }
        for handle in handles {
            body.push_str(&handle.join().expect("query worker panicked"));
        }
    });
    let elapsed = started.elapsed();
    if args.queries.is_some() {
        eprintln!(
            "processed {} queries in {:.3} ms ({:.3} ms/query, {} workers)",
            ids.len(),
            elapsed.as_secs_f64() * 1e3,
            elapsed.as_secs_f64() * 1e3 / ids.len() as f64,
            workers
        );
    }

    let tsv = format!("query_id\trank\tcandidate_id\tscore\n{body}");
    match &args.out {
        Some(dir) => {
            io::write_text(&dir.join("results.tsv"), &tsv)?;
            let mut manifest = RunManifest::new("query", 0);
            manifest.record_input(&args.codes)?;
            if let Some(edges) = &args.edges {
                manifest.record_input(edges)?;
            }
            if let Some(batch) = &args.queries {
                manifest.record_input(batch)?;
            }
            manifest.record_artifact("results", "results.tsv");
            manifest.write(dir)?;
            println!("results written to {}", dir.join("results.tsv").display());
        }
        None => print!("{tsv}"),
    }
    Ok(())
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let resolved = resolve_config(args.hyper.config.as_ref(), &args.hyper.overrides())?;
    io::require_input(&args.codes)?;
    io::require_input(&args.edges)?;
    let table = io::read_code_table(&args.codes)?;
    let graph = io::load_graph(&args.edges)?;
    if graph.node_count() != table.nodes() {
        return Err(Error::Validation(format!(
            "code table has {} nodes but the graph has {}",
            table.nodes(),
            graph.node_count()
        )));
    }
    let cfg = &resolved.train;
    let split = graph.split(resolved.test_ratio, cfg.seed)?;
    let train_graph = split.train_graph(graph.n1(), graph.n2())?;

    let mut manifest = RunManifest::new("eval", cfg.seed).with_config(resolved.snapshot());
    manifest.record_input(&args.codes)?;
    manifest.record_input(&args.edges)?;
    let fingerprint = manifest.config_fingerprint();
    let report = hamming_metric_report(
        &table,
        &train_graph,
        &split,
        &REPORT_NS,
        thread_count(args.threads),
        fingerprint,
    );

    let mut aggregate_csv = String::from("n,recall,ndcg\n");
    let mut rows = Vec::new();
    for (i, &n) in report.ns.iter().enumerate() {
        let _ = writeln!(aggregate_csv, "{n},{},{}", report.recall[i], report.ndcg[i]);
        rows.push(vec![
            format!("{n}"),
            format!("{:.6}", report.recall[i]),
            format!("{:.6}", report.ndcg[i]),
        ]);
    }
    let mut per_query_csv = String::from("query,n,recall,ndcg\n");
    for q in &report.per_query {
        for (i, &n) in report.ns.iter().enumerate() {
            let _ = writeln!(per_query_csv, "{},{n},{},{}", q.node, q.recall[i], q.ndcg[i]);
        }
    }

    println!(
        "ranking metrics over {} queries (config {})",
        report.queries, report.fingerprint
    );
    print!("{}", align_table(&["N", "recall", "ndcg"], &rows));
    if let Some(dir) = &args.out {
        io::write_text(&dir.join("metrics_by_n.csv"), &aggregate_csv)?;
        io::write_text(&dir.join("per_query.csv"), &per_query_csv)?;
        manifest.record_artifact("metrics_by_n", "metrics_by_n.csv");
        manifest.record_artifact("per_query", "per_query.csv");
        manifest.write(dir)?;
    }
    Ok(())
}

fn metric_cell(v: f64) -> String {
    if v.is_nan() {
        "failed".into()
    } else {
        format!("{v:.6}")
    }
}

fn pct_cell(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:+.2}%")
    }
}

/// Comparison table against the first row, as CSV plus aligned text.
fn render_suite(label_header: &str, rows: &[SuiteRow]) -> (String, String) {
    let baseline = rows.first().expect("suite produced rows");
    let mut csv = format!(
        "{label_header},recall,ndcg,loss_total,epochs,per_iter_ms,delta_recall_pct,delta_ndcg_pct,status\n"
    );
    let mut text_rows = Vec::new();
    for row in rows {
        let d_recall = delta_pct(row.recall, baseline.recall);
        let d_ndcg = delta_pct(row.ndcg, baseline.ndcg);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            row.label,
            row.recall,
            row.ndcg,
            row.loss_total,
            row.epochs_run,
            row.per_iter_ms,
            d_recall,
            d_ndcg,
            if row.failed { "failed" } else { "ok" }
        );
        text_rows.push(vec![
            row.label.clone(),
            metric_cell(row.recall),
            pct_cell(d_recall),
            metric_cell(row.ndcg),
            pct_cell(d_ndcg),
            metric_cell(row.loss_total),
            format!("{}", row.epochs_run),
            format!("{:.3}", row.per_iter_ms),
        ]);
    }
    let text = align_table(
        &[label_header, "recall", "d_recall", "ndcg", "d_ndcg", "loss", "epochs", "ms/iter"],
        &text_rows,
    );
    (csv, text)
}

pub fn run_ablate(args: &AblateArgs) -> Result<()> {
    if args.hyper.ablation.is_some() {
        return Err(Error::Usage(
            "ablate trains every variant itself; drop the --ablation flag".into(),
        ));
    }
    let resolved = resolve_config(args.hyper.config.as_ref(), &args.hyper.overrides())?;
    io::require_input(&args.edges)?;
    let graph = io::load_graph(&args.edges)?;
    let split = graph.split(resolved.test_ratio, resolved.train.seed)?;
    let rows = run_ablation_suite(graph.n1(), graph.n2(), &split, &resolved.train);
    let (csv, text) = render_suite("variant", &rows);
    print!("{text}");

    io::write_text(&args.out.join("ablation.csv"), &csv)?;
    let mut manifest =
        RunManifest::new("ablate", resolved.train.seed).with_config(resolved.snapshot());
    manifest.record_input(&args.edges)?;
    if let Some(config_path) = &args.hyper.config {
        manifest.record_input(config_path)?;
    }
    manifest.record_artifact("ablation", "ablation.csv");
    manifest.write(&args.out)?;
    Ok(())
}

pub fn run_estimators(args: &EstimatorsArgs) -> Result<()> {
    let resolved = resolve_config(args.hyper.config.as_ref(), &args.hyper.overrides())?;
    io::require_input(&args.edges)?;
    let graph = io::load_graph(&args.edges)?;
    let split = graph.split(resolved.test_ratio, resolved.train.seed)?;
    let grid = estimator_grid(&resolved.train);
    let rows = run_estimator_suite(graph.n1(), graph.n2(), &split, &resolved.train, &grid);
    let (csv, text) = render_suite("estimator", &rows);
    print!("{text}");

    io::write_text(&args.out.join("estimators.csv"), &csv)?;
    let mut manifest =
        RunManifest::new("estimators", resolved.train.seed).with_config(resolved.snapshot());
    manifest.record_input(&args.edges)?;
    if let Some(config_path) = &args.hyper.config {
        manifest.record_input(config_path)?;
    }
    manifest.record_artifact("estimators", "estimators.csv");
    manifest.write(&args.out)?;
    Ok(())
}

pub fn run_bench(args: &BenchArgs) -> Result<()> {
    let mut cfg = BenchConfig::new(args.candidates, args.dim, args.depth);
    cfg.top_n = args.n;
    cfg.seed = args.seed;
    log::info!(
        "benchmarking {} candidates at d={}, L={} ({} queries)",
        cfg.candidates,
        cfg.dim,
        cfg.depth,
        cfg.queries
    );
    let report = bench_matching(&cfg)?;
    let rows = vec![
        vec![
            "hamming".to_string(),
            format!("{:.4}", report.hamming_mean_ms),
            format!("{:.4}", report.hamming_p99_ms),
        ],
        vec![
            "float".to_string(),
            format!("{:.4}", report.float_mean_ms),
            format!("{:.4}", report.float_p99_ms),
        ],
    ];
    println!(
        "rankings identical across both paths for all {} queries (top {} of {})",
        report.queries, report.top_n, report.candidates
    );
    print!("{}", align_table(&["path", "mean_ms", "p99_ms"], &rows));
    println!(
        "hamming-vs-float speedup: {:.2}x mean, {:.2}x p99",
        report.speedup_mean, report.speedup_p99
    );
    if let Some(dir) = &args.out {
        let csv = format!(
            "candidates,d,L,queries,top_n,hamming_mean_ms,hamming_p99_ms,float_mean_ms,float_p99_ms,speedup_mean,speedup_p99\n{},{},{},{},{},{},{},{},{},{},{}\n",
            report.candidates,
            report.dim,
            report.depth,
            report.queries,
            report.top_n,
            report.hamming_mean_ms,
            report.hamming_p99_ms,
            report.float_mean_ms,
            report.float_p99_ms,
            report.speedup_mean,
            report.speedup_p99
        );
        io::write_text(&dir.join("bench.csv"), &csv)?;
        let mut manifest = RunManifest::new("bench", args.seed);
        manifest.record_artifact("bench", "bench.csv");
        manifest.write(dir)?;
    }
    Ok(())
}

/// Parses a start:end:step grid specification into inclusive sample points.
fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let usage =
        || Error::Usage(format!("bad grid {spec:?}; expected start:end:step, e.g. 0.01:0.5:0.01"));
    if parts.len() != 3 {
        return Err(usage());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>().map_err(|_| usage()))
        .collect::<Result<_>>()?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0 && end >= start && start.is_finite() && end.is_finite()) {
        return Err(usage());
    }
    let count = ((end - start) / step + 1.0 + 1e-9).floor() as usize;
    Ok((0..count).map(|i| start + step * i as f64).collect())
}

pub fn run_landscape(args: &LandscapeArgs) -> Result<()> {
    let kind = match args.loss.as_str() {
        "rec" => LossKind::Rec,
        "bpr" => LossKind::Bpr,
        "total" => LossKind::Total,
        other => {
            return Err(Error::Usage(format!(
                "unknown loss {other:?}; expected rec, bpr, or total"
            )))
        }
    };
    let grid = parse_grid(&args.p)?;
    let resolved = resolve_config(args.hyper.config.as_ref(), &args.hyper.overrides())?;
    io::require_input(&args.edges)?;
    let graph = io::load_graph(&args.edges)?;
    let cfg = resolved.train.clone();
    let split = graph.split(resolved.test_ratio, cfg.seed)?;
    let trainer = match &args.checkpoint {
        Some(path) => {
            let ckpt = io::read_checkpoint(path)?;
            if ckpt.n1 != graph.n1() || ckpt.n2 != graph.n2() {
                return Err(Error::Validation(format!(
                    "checkpoint is for a {}x{} graph but the edges give {}x{}",
                    ckpt.n1,
                    ckpt.n2,
                    graph.n1(),
                    graph.n2()
                )));
            }
            Trainer::with_state(
                graph.n1(),
                graph.n2(),
                &split,
                cfg,
                ckpt.embeddings,
                ckpt.adam_m,
                ckpt.adam_v,
                ckpt.adam_t,
            )?
        }
        None => {
            log::info!("no checkpoint given; training {} epochs first", cfg.epochs);
            let mut trainer = Trainer::new(graph.n1(), graph.n2(), &split, cfg)?;
            trainer.run()?;
            trainer
        }
    };
    let cells = trainer.landscape_scan(&grid, kind)?;
    let mut csv = String::from("p_plus,p_minus,loss_hashed,loss_smooth\n");
    for cell in &cells {
        let _ = writeln!(csv, "{},{},{},{}", cell.p_plus, cell.p_minus, cell.hashed, cell.smooth);
    }
    match &args.out {
        Some(dir) => {
            io::write_text(&dir.join("landscape.csv"), &csv)?;
            let mut manifest =
                RunManifest::new("landscape", resolved.train.seed).with_config(resolved.snapshot());
            manifest.record_input(&args.edges)?;
            if let Some(ckpt) = &args.checkpoint {
                manifest.record_input(ckpt)?;
            }
            manifest.record_artifact("landscape", "landscape.csv");
            manifest.write(dir)?;
            println!(
                "scanned {} cells over {} magnitudes; wrote {}",
                cells.len(),
                grid.len(),
                dir.join("landscape.csv").display()
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn run_validate(args: &ValidateArgs) -> Result<()> {
    let threads = thread_count(args.threads);
    // Spectrum of the fixed validation matrix: eight descending, distinct
    // singular values explored through a random rotation drawn from the seed.
    let sigma: Vec<f64> = (1..=8).rev().map(|s| s as f64).collect();
    for power_iterations in [1usize, 2, 3] {
        let report = shrink_ordering_threaded(&sigma, power_iterations, 0.5, args.shrink_draws, args.seed, threads)?;
        let worst_gap = report
            .rows
            .windows(2)
            .map(|w| w[0].mu_hat - w[1].mu_hat)
            .fold(f64::NEG_INFINITY, f64::max);
        println!(
            "dispersion check K={power_iterations}: {} draws, {} ordering violations at 3 sigma (worst adjacent gap {worst_gap:.2e})",
            report.samples, report.violations
        );
        if !report.ascending_at_three_sigma() {
            let offender = report
                .rows
                .windows(2)
                .find(|w| {
                    let gap = w[0].mu_hat - w[1].mu_hat;
                    let noise = 3.0
                        * (w[0].stderr * w[0].stderr + w[1].stderr * w[1].stderr).sqrt();
                    gap > noise
                })
                .expect("a violation was counted");
            return Err(Error::Validation(format!(
                "shrink factors out of order at K={power_iterations}: mode {} (sigma {}) has mu {:.6e} vs mode {} (sigma {}) mu {:.6e}",
                offender[0].k,
                offender[0].sigma,
                offender[0].mu_hat,
                offender[1].k,
                offender[1].sigma,
                offender[1].mu_hat
            )));
        }
    }

    let report = scoring_identity_fuzz(args.identity_trials, args.seed);
    println!(
        "scoring identity fuzz: {} violations in {} trials ({} terms checked)",
        report.violation_count, report.trials, report.terms_checked
    );
    if !report.passed() {
        let first = report.violations.first().expect("violations were recorded");
        return Err(Error::Validation(format!("scoring identity violated: {first}")));
    }
    Ok(())
}

/// Convenience wrapper used by tests: single-cutoff held-out metrics for a
/// table file against an edge list, mirroring the training-time evaluation.
pub fn eval_table_at(
    codes: &Path,
    edges: &Path,
    test_ratio: f64,
    seed: u64,
    top_n: usize,
) -> Result<(f64, f64)> {
    let table = io::read_code_table(codes)?;
    let graph = io::load_graph(edges)?;
    let split = graph.split(test_ratio, seed)?;
    let train_graph = split.train_graph(graph.n1(), graph.n2())?;
    let summary = evaluate_hamming(&table, &train_graph, &split, top_n);
    Ok((summary.recall, summary.ndcg))
}
