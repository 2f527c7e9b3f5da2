//! Retrieval benchmark over synthetic emotion databases: accuracy and
//! per-query latency for each (method, database size) cell.

mod data;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_store::{EmbeddingDatabase, EmotionEmbedding};
use crate::io::atomic_write;
use crate::retrieval::{kmeans_fit, retrieve, ClusterIndex, Method, RetrievalError, DEFAULT_MAX_ITERS};

pub use data::{emotion_label, generate_synthetic_db, SyntheticDatasetConfig, SyntheticMixture};

/// Queries run and discarded before timing starts.
pub const WARMUP_QUERIES: usize = 10;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("database size {size} is unavailable: it must be a positive multiple of {emotions} emotions")]
    UnavailableSize { size: usize, emotions: usize },
    #[error("query set is empty")]
    EmptyQueries,
    #[error("no results to report")]
    EmptyResults,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report encoding: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub method: Method,
    pub db_size: usize,
    pub accuracy: f64,
    pub mean_latency_ns: u64,
    pub p95_latency_ns: u64,
    pub queries: usize,
    /// Sum of `candidates_scanned` over the measured queries.
    pub total_candidates_scanned: u64,
}

impl BenchResult {
    pub fn mean_candidates_scanned(&self) -> f64 {
        self.total_candidates_scanned as f64 / self.queries as f64
    }
}

/// Fraction of queries whose retrieved record carries the query's label.
pub fn measure_accuracy(
    db: &EmbeddingDatabase,
    index: Option<&ClusterIndex>,
    method: Method,
    queries: &[(EmotionEmbedding, String)],
) -> Result<f64, BenchError> {
    if queries.is_empty() {
        return Err(BenchError::EmptyQueries);
    }
    let mut matched = 0usize;
    for (q, truth) in queries {
        let r = retrieve(db, index, q, None, method)?;
        if db.records()[r.record_index].emotion_label == *truth {
            matched += 1;
        }
    }
    Ok(matched as f64 / queries.len() as f64)
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub cells: Vec<(Method, usize)>,
    pub queries: usize,
    pub seed: u64,
    /// Shape of the synthetic data; `records_per_emotion` is derived per cell.
    pub dataset: SyntheticDatasetConfig,
    pub max_iters: usize,
    /// Run cells on separate threads. Timings then share the machine.
    pub parallel: bool,
}

impl BenchConfig {
    /// Every method crossed with every size, methods outermost.
    pub fn grid(methods: &[Method], sizes: &[usize], queries: usize, seed: u64) -> Self {
        let cells = methods
            .iter()
            .flat_map(|&m| sizes.iter().map(move |&s| (m, s)))
            .collect();
        Self {
            cells,
            queries,
            seed,
            dataset: SyntheticDatasetConfig {
                seed,
                ..SyntheticDatasetConfig::default()
            },
            max_iters: DEFAULT_MAX_ITERS,
            parallel: false,
        }
    }
}

struct Prepared {
    db: EmbeddingDatabase,
    index: Option<ClusterIndex>,
}

fn p95(sorted: &[u64]) -> u64 {
    let rank = (sorted.len() as f64 * 0.95).ceil() as usize;
    sorted[rank.saturating_sub(1).min(sorted.len() - 1)]
}

fn run_cell(
    method: Method,
    prepared: &Prepared,
    queries: &[(EmotionEmbedding, String)],
) -> Result<BenchResult, BenchError> {
    let db = &prepared.db;
    let index = prepared.index.as_ref();
    for (q, _) in queries.iter().take(WARMUP_QUERIES) {
        std::hint::black_box(retrieve(db, index, q, None, method)?);
    }
    let mut latencies = Vec::with_capacity(queries.len());
    let mut matched = 0usize;
    let mut scanned = 0u64;
    for (q, truth) in queries {
        let start = Instant::now();
        let r = retrieve(db, index, q, None, method)?;
        latencies.push(start.elapsed().as_nanos() as u64);
        scanned += r.candidates_scanned as u64;
        if db.records()[r.record_index].emotion_label == *truth {
            matched += 1;
        }
    }
    let mean = latencies.iter().sum::<u64>() / latencies.len() as u64;
    latencies.sort_unstable();
    Ok(BenchResult {
        method,
        db_size: db.len(),
        accuracy: matched as f64 / queries.len() as f64,
        mean_latency_ns: mean,
        p95_latency_ns: p95(&latencies),
        queries: queries.len(),
        total_candidates_scanned: scanned,
    })
}

/// Builds one database per distinct size (and one index per size used with
/// the clustering method), then measures every cell against a shared
/// held-out query set. Accuracy is deterministic under `seed`; latency is not.
pub fn run_benchmark(config: &BenchConfig) -> Result<Vec<BenchResult>, BenchError> {
    if config.queries == 0 {
        return Err(BenchError::EmptyQueries);
    }
    if config.cells.is_empty() {
        return Err(BenchError::EmptyResults);
    }
    let emotions = config.dataset.num_emotions;
    let mut prepared: BTreeMap<usize, Prepared> = BTreeMap::new();
    for &(method, size) in &config.cells {
        if size == 0 || emotions == 0 || size % emotions != 0 {
            return Err(BenchError::UnavailableSize { size, emotions });
        }
        if !prepared.contains_key(&size) {
            let cfg = SyntheticDatasetConfig {
                records_per_emotion: size / emotions,
                ..config.dataset.clone()
            };
            let db = generate_synthetic_db(&cfg)?;
            prepared.insert(size, Prepared { db, index: None });
        }
        let p = prepared.get_mut(&size).expect("inserted above");
        if method == Method::Clustering && p.index.is_none() {
            let k = p.db.labels().len();
            p.index = Some(kmeans_fit(&p.db, k, config.max_iters, config.seed)?);
        }
    }
    let mixture = SyntheticMixture::new(config.dataset.clone())?;
    let queries = mixture.sample_queries(config.queries, config.seed);

    if config.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = config
                .cells
                .iter()
                .map(|&(method, size)| {
                    let p = &prepared[&size];
                    let q = &queries;
                    scope.spawn(move || run_cell(method, p, q))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("benchmark cell panicked"))
                .collect()
        })
    } else {
        config
            .cells
            .iter()
            .map(|&(method, size)| run_cell(method, &prepared[&size], &queries))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown report format {other:?} (expected csv or json)")),
        }
    }
}

pub const CSV_COLUMNS: [&str; 6] = [
    "method",
    "db_size",
    "accuracy",
    "mean_latency_ns",
    "p95_latency_ns",
    "queries",
];

pub fn render_report(results: &[BenchResult], format: ReportFormat) -> Result<Vec<u8>, BenchError> {
    if results.is_empty() {
        return Err(BenchError::EmptyResults);
    }
    let enc = |e: &dyn std::fmt::Display| BenchError::Encode(e.to_string());
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(results).map_err(|e| enc(&e))?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_COLUMNS).map_err(|e| enc(&e))?;
            for r in results {
                w.write_record([
                    r.method.as_str().to_string(),
                    r.db_size.to_string(),
                    r.accuracy.to_string(),
                    r.mean_latency_ns.to_string(),
                    r.p95_latency_ns.to_string(),
                    r.queries.to_string(),
                ])
                .map_err(|e| enc(&e))?;
            }
            w.into_inner().map_err(|e| enc(&e))
        }
    }
}

pub fn emit_report(results: &[BenchResult], path: &Path, format: ReportFormat) -> Result<(), BenchError> {
    let bytes = render_report(results, format)?;
    atomic_write(path, &bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::retrieve_embedding_based;

    fn sample(method: Method, size: usize, acc: f64) -> BenchResult {
        BenchResult {
            method,
            db_size: size,
            accuracy: acc,
            mean_latency_ns: 1200,
            p95_latency_ns: 2000,
            queries: 100,
            total_candidates_scanned: size as u64 * 100,
        }
    }

    #[test]
    fn csv_has_header_plus_rows() {
        let rows = vec![
            sample(Method::Embedding, 3000, 1.0),
            sample(Method::Embedding, 8000, 0.99),
            sample(Method::Clustering, 3000, 0.97),
            sample(Method::Clustering, 8000, 0.5),
        ];
        let text = String::from_utf8(render_report(&rows, ReportFormat::Csv).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "method,db_size,accuracy,mean_latency_ns,p95_latency_ns,queries");
        assert_eq!(lines[1], "embedding,3000,1,1200,2000,100");
    }

    #[test]
    fn json_round_trip() {
        let rows = vec![
            sample(Method::Embedding, 3000, 0.123456789),
            sample(Method::Clustering, 8000, 1.0 / 3.0),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        emit_report(&rows, &path, ReportFormat::Json).unwrap();
        let back: Vec<BenchResult> = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn empty_results_rejected() {
        assert!(matches!(
            render_report(&[], ReportFormat::Csv),
            Err(BenchError::EmptyResults)
        ));
    }

    #[test]
    fn p95_nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(p95(&v), 95);
        assert_eq!(p95(&[7]), 7);
        assert_eq!(p95(&[1, 2]), 2);
    }

    fn small_mixture() -> SyntheticMixture {
        SyntheticMixture::new(SyntheticDatasetConfig {
            num_emotions: 5,
            dim: 16,
            records_per_emotion: 40,
            cluster_sigma: 0.02,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn accuracy_at_centres_is_perfect() {
        let m = small_mixture();
        let db = m.sample_db();
        let queries = m.center_queries();
        // brute-force oracle: label of the most similar record, computed by hand
        for (q, label) in &queries {
            let qn: f64 = q.values().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            let best = db
                .records()
                .iter()
                .max_by(|a, b| {
                    let s = |r: &crate::embedding_store::UtteranceRecord| {
                        let rn: f64 = r.embedding.values().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
                        q.values().iter().zip(r.embedding.values()).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum::<f64>() / (qn * rn)
                    };
                    s(a).total_cmp(&s(b))
                })
                .unwrap();
            assert_eq!(&best.emotion_label, label);
        }
        assert_eq!(measure_accuracy(&db, None, Method::Embedding, &queries).unwrap(), 1.0);
    }

    #[test]
    fn mislabeled_single_query_scores_zero() {
        let m = small_mixture();
        let db = m.sample_db();
        let (q, _) = m.center_queries().remove(0);
        let acc = measure_accuracy(&db, None, Method::Embedding, &[(q, "nope".into())]).unwrap();
        assert_eq!(acc, 0.0);
        assert!(matches!(
            measure_accuracy(&db, None, Method::Embedding, &[]),
            Err(BenchError::EmptyQueries)
        ));
    }

    #[test]
    fn accuracy_ignores_query_order() {
        let m = small_mixture();
        let db = m.sample_db();
        let mut queries = m.sample_queries(60, 1);
        let idx = kmeans_fit(&db, 5, 50, 0).unwrap();
        let a = measure_accuracy(&db, Some(&idx), Method::Clustering, &queries).unwrap();
        queries.reverse();
        let b = measure_accuracy(&db, Some(&idx), Method::Clustering, &queries).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clustering_recall_on_separated_data() {
        let m = small_mixture();
        assert!(m.separation_in_sigmas() >= 6.0);
        let db = m.sample_db();
        let idx = kmeans_fit(&db, 5, 100, 3).unwrap();
        let queries = m.sample_queries(1000, 9);
        let mut agree = 0;
        for (q, _) in &queries {
            let a = retrieve_embedding_based(&db, q).unwrap();
            let b = crate::retrieval::retrieve_clustering_based(&db, &idx, q).unwrap();
            if db.records()[a.record_index].emotion_label == db.records()[b.record_index].emotion_label {
                agree += 1;
            }
        }
        assert!(agree >= 990, "agreement {agree}/1000");
    }

    #[test]
    fn benchmark_grid_shape_and_scan_counts() {
        let mut cfg = BenchConfig::grid(&[Method::Embedding, Method::Clustering], &[400, 800], 50, 2);
        cfg.dataset.dim = 16;
        let results = run_benchmark(&cfg).unwrap();
        assert_eq!(results.len(), 4);
        let get = |m, s| results.iter().find(|r| r.method == m && r.db_size == s).unwrap();
        assert_eq!(get(Method::Embedding, 400).mean_candidates_scanned(), 400.0);
        assert_eq!(get(Method::Embedding, 800).mean_candidates_scanned(), 800.0);
        assert!(
            get(Method::Clustering, 800).total_candidates_scanned
                < get(Method::Embedding, 800).total_candidates_scanned
        );
        for r in &results {
            assert_eq!(r.queries, 50);
            assert!(r.p95_latency_ns >= r.mean_latency_ns / 10);
        }
        let again = run_benchmark(&cfg).unwrap();
        let acc: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
        let acc2: Vec<f64> = again.iter().map(|r| r.accuracy).collect();
        assert_eq!(acc, acc2);
        cfg.parallel = true;
        let par = run_benchmark(&cfg).unwrap();
        assert_eq!(acc, par.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    }

    #[test]
    fn benchmark_rejects_bad_sizes() {
        let cfg = BenchConfig::grid(&[Method::Embedding], &[1001], 10, 0);
        assert!(matches!(
            run_benchmark(&cfg),
            Err(BenchError::UnavailableSize { size: 1001, emotions: 8 })
        ));
        let cfg = BenchConfig::grid(&[Method::Embedding], &[800], 0, 0);
        assert!(matches!(run_benchmark(&cfg), Err(BenchError::EmptyQueries)));
    }
}
