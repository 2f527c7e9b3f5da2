//! Emotion-prompt retrieval: exhaustive cosine scan and single-probe
//! cluster retrieval, both optionally gated by intensity level.

mod index_format;
mod kmeans;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_store::{
    filter_by_intensity, EmbeddingDatabase, EmotionEmbedding, Fingerprint, IntensityLevel,
};

pub use index_format::{decode_index, encode_index, load_index, save_index, EMIX_MAGIC, EMIX_VERSION};
pub use kmeans::{kmeans_fit, ClusterIndex, DEFAULT_MAX_ITERS};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no candidates to retrieve from")]
    NoCandidates,
    #[error("no records with intensity {0}")]
    EmptySubset(IntensityLevel),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero-norm embedding ({0})")]
    ZeroNorm(String),
    #[error("k={k} is invalid for {records} records")]
    InvalidK { k: usize, records: usize },
    #[error("index fingerprint {index} does not match database {db}")]
    StaleIndex { index: Fingerprint, db: Fingerprint },
    #[error("clustering retrieval needs an index{}", .0.map(|l| format!(" for intensity {l}")).unwrap_or_default())]
    MissingIndex(Option<IntensityLevel>),
    #[error("malformed index: {0}")]
    MalformedIndex(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Embedding,
    Clustering,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Embedding => "embedding",
            Method::Clustering => "clustering",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "embedding" => Ok(Method::Embedding),
            "clustering" => Ok(Method::Clustering),
            other => Err(format!(
                "unknown retrieval method {other:?} (expected embedding or clustering)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub record_id: String,
    /// Position of the record in the database handed to the retriever.
    pub record_index: usize,
    pub similarity: f64,
    pub method: Method,
    /// Records whose similarity was evaluated.
    pub candidates_scanned: usize,
    /// Centroid distance evaluations (clustering only).
    pub centroid_comparisons: usize,
    pub elapsed_ns: u64,
}

/// Cosine similarity accumulated in f64, clamped to [-1, 1].
pub fn cosine_similarity(
    a: &EmotionEmbedding,
    b: &EmotionEmbedding,
) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroNorm("cosine operand".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Unit-normalizes the query in f64 after checking its dimension.
fn unit_query(query: &EmotionEmbedding, dim: usize) -> Result<Vec<f64>, RetrievalError> {
    if query.dim() != dim {
        return Err(RetrievalError::DimensionMismatch {
            expected: dim,
            found: query.dim(),
        });
    }
    let norm = query.norm();
    if norm == 0.0 {
        return Err(RetrievalError::ZeroNorm("query".into()));
    }
    Ok(query.values().iter().map(|&v| f64::from(v) / norm).collect())
}

/// Cosine of a unit query against a raw record vector. `None` for a
/// zero-norm record, which can never be retrieved.
#[inline]
fn cosine_to_unit(unit: &[f64], v: &[f32]) -> Option<f64> {
    let (mut dot, mut nn) = (0.0f64, 0.0f64);
    for (&q, &x) in unit.iter().zip(v) {
        let x = f64::from(x);
        dot += q * x;
        nn += x * x;
    }
    (nn > 0.0).then(|| (dot / nn.sqrt()).clamp(-1.0, 1.0))
}

/// Best record among `positions`; strict `>` keeps the earliest on ties.
fn argmax<I: Iterator<Item = usize>>(
    db: &EmbeddingDatabase,
    unit: &[f64],
    positions: I,
) -> Option<(usize, f64)> {
    let records = db.records();
    let mut best: Option<(usize, f64)> = None;
    for i in positions {
        if let Some(s) = cosine_to_unit(unit, records[i].embedding.values()) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best
}

fn finish(
    db: &EmbeddingDatabase,
    found: Option<(usize, f64)>,
    method: Method,
    candidates_scanned: usize,
    centroid_comparisons: usize,
    start: Instant,
) -> Result<RetrievalResult, RetrievalError> {
    let elapsed_ns = start.elapsed().as_nanos() as u64;
    let (i, similarity) = found.ok_or(RetrievalError::NoCandidates)?;
    Ok(RetrievalResult {
        record_id: db.records()[i].id.clone(),
        record_index: i,
        similarity,
        method,
        candidates_scanned,
        centroid_comparisons,
        elapsed_ns,
    })
}

/// Exhaustive scan returning the record with the highest cosine similarity
/// to `query`; ties go to the earliest record.
pub fn retrieve_embedding_based(
    db: &EmbeddingDatabase,
    query: &EmotionEmbedding,
) -> Result<RetrievalResult, RetrievalError> {
    let start = Instant::now();
    if db.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    let unit = unit_query(query, db.dim())?;
    let found = argmax(db, &unit, 0..db.len());
    finish(db, found, Method::Embedding, db.len(), 0, start)
}

/// Nearest-centroid probe followed by a cosine argmax over that cluster's
/// members. An empty probed cluster falls back to scanning all of `db`.
pub fn retrieve_clustering_based(
    db: &EmbeddingDatabase,
    index: &ClusterIndex,
    query: &EmotionEmbedding,
) -> Result<RetrievalResult, RetrievalError> {
    let start = Instant::now();
    if index.fingerprint() != db.fingerprint() {
        return Err(RetrievalError::StaleIndex {
            index: index.fingerprint(),
            db: db.fingerprint(),
        });
    }
    if db.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    let unit = unit_query(query, db.dim())?;
    let cluster = index.nearest_centroid(&unit);
    let members = index.members(cluster);
    let (found, scanned) = if members.is_empty() {
        (argmax(db, &unit, 0..db.len()), db.len())
    } else {
        (
            argmax(db, &unit, members.iter().map(|&m| m as usize)),
            members.len(),
        )
    };
    finish(db, found, Method::Clustering, scanned, index.k(), start)
}

/// Gate by intensity (if requested) and dispatch to `method`.
///
/// With an intensity and the clustering method, `index` must have been built
/// over the gated subset. The returned `record_index` refers to `db`.
pub fn retrieve(
    db: &EmbeddingDatabase,
    index: Option<&ClusterIndex>,
    query: &EmotionEmbedding,
    intensity: Option<IntensityLevel>,
    method: Method,
) -> Result<RetrievalResult, RetrievalError> {
    let Some(level) = intensity else {
        return dispatch(db, index, query, method, None);
    };
    let subset = filter_by_intensity(db, level);
    if subset.is_empty() {
        return Err(RetrievalError::EmptySubset(level));
    }
    let mut result = dispatch(&subset, index, query, method, Some(level))?;
    result.record_index = db
        .position_of(&result.record_id)
        .expect("subset records come from db");
    Ok(result)
}

fn dispatch(
    db: &EmbeddingDatabase,
    index: Option<&ClusterIndex>,
    query: &EmotionEmbedding,
    method: Method,
    level: Option<IntensityLevel>,
) -> Result<RetrievalResult, RetrievalError> {
    match method {
        Method::Embedding => retrieve_embedding_based(db, query),
        Method::Clustering => {
            let index = index.ok_or(RetrievalError::MissingIndex(level))?;
            retrieve_clustering_based(db, index, query)
        }
    }
}

/// How indices are built for a [`RetrievalEngine`].
#[derive(Debug, Clone)]
pub struct IndexOptions {
    /// Fixed cluster count. `None` uses the number of distinct emotion labels
    /// in each subset.
    pub k: Option<usize>,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for IndexOptions {
    fn default() -> Self {
        Self {
            k: None,
            max_iters: DEFAULT_MAX_ITERS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Partition {
    db: EmbeddingDatabase,
    /// Position of each subset record in the full database.
    positions: Vec<usize>,
    index: Option<ClusterIndex>,
}

/// A database with its three intensity subsets materialized up front and an
/// optional cluster index for each of the four partitions. Immutable; safe
/// to query from many threads.
#[derive(Debug, Clone)]
pub struct RetrievalEngine {
    full: Partition,
    levels: [Partition; 3],
}

/// Label used for a partition in file names and messages.
pub fn partition_name(level: Option<IntensityLevel>) -> &'static str {
    level.map_or("all", IntensityLevel::as_str)
}

impl RetrievalEngine {
    /// Engine without cluster indices (embedding-based retrieval only).
    pub fn new(db: EmbeddingDatabase) -> Self {
        let levels = IntensityLevel::ALL.map(|level| {
            let positions: Vec<usize> = db
                .records()
                .iter()
                .enumerate()
                .filter(|(_, r)| r.intensity == level)
                .map(|(i, _)| i)
                .collect();
            Partition {
                db: filter_by_intensity(&db, level),
                positions,
                index: None,
            }
        });
        let positions = (0..db.len()).collect();
        Self {
            full: Partition {
                db,
                positions,
                index: None,
            },
            levels,
        }
    }

    /// Builds the full-set index and one index per non-empty intensity
    /// subset. Empty subsets are skipped and named in the returned list.
    pub fn build(
        db: EmbeddingDatabase,
        opts: &IndexOptions,
    ) -> Result<(Self, Vec<IntensityLevel>), RetrievalError> {
        let mut engine = Self::new(db);
        let mut skipped = Vec::new();
        for level in [None]
            .into_iter()
            .chain(IntensityLevel::ALL.into_iter().map(Some))
        {
            let part = engine.partition_mut(level);
            if part.db.is_empty() {
                if let Some(l) = level {
                    skipped.push(l);
                    continue;
                }
                return Err(RetrievalError::NoCandidates);
            }
            let k = opts.k.unwrap_or_else(|| part.db.labels().len());
            part.index = Some(kmeans_fit(&part.db, k, opts.max_iters, opts.seed)?);
        }
        Ok((engine, skipped))
    }

    /// Attaches a prebuilt index to a partition. The index fingerprint must
    /// match that partition's database.
    pub fn set_index(
        &mut self,
        level: Option<IntensityLevel>,
        index: ClusterIndex,
    ) -> Result<(), RetrievalError> {
        let part = self.partition_mut(level);
        if index.fingerprint() != part.db.fingerprint() {
            return Err(RetrievalError::StaleIndex {
                index: index.fingerprint(),
                db: part.db.fingerprint(),
            });
        }
        part.index = Some(index);
        Ok(())
    }

    fn partition(&self, level: Option<IntensityLevel>) -> &Partition {
        match level {
            None => &self.full,
            Some(l) => &self.levels[l.code() as usize],
        }
    }

    fn partition_mut(&mut self, level: Option<IntensityLevel>) -> &mut Partition {
        match level {
            None => &mut self.full,
            Some(l) => &mut self.levels[l.code() as usize],
        }
    }

    pub fn database(&self) -> &EmbeddingDatabase {
        &self.full.db
    }

    /// The (sub)database searched for a given gate.
    pub fn subset(&self, level: Option<IntensityLevel>) -> &EmbeddingDatabase {
        &self.partition(level).db
    }

    pub fn index(&self, level: Option<IntensityLevel>) -> Option<&ClusterIndex> {
        self.partition(level).index.as_ref()
    }

    /// Same contract as [`retrieve`], against the precomputed partitions.
    /// `record_index` refers to the full database.
    pub fn retrieve(
        &self,
        query: &EmotionEmbedding,
        intensity: Option<IntensityLevel>,
        method: Method,
    ) -> Result<RetrievalResult, RetrievalError> {
        let part = self.partition(intensity);
        if let Some(level) = intensity {
            if part.db.is_empty() {
                return Err(RetrievalError::EmptySubset(level));
            }
        }
        let mut result = dispatch(&part.db, part.index.as_ref(), query, method, intensity)?;
        result.record_index = part.positions[result.record_index];
        Ok(result)
    }
}
