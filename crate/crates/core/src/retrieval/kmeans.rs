//! Spherical K-means over unit-normalized embeddings.
//!
//! Points are normalized to unit length and clustered with squared Euclidean
//! distance; centroids are re-normalized after every mean update. On the
//! unit sphere `|x - c|^2 = 2 - 2 x.c`, so nearest-centroid assignment is the
//! same as highest cosine similarity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RetrievalError;
use crate::embedding_store::{EmbeddingDatabase, Fingerprint};

/// Lloyd iteration cap used when the caller has no preference.
pub const DEFAULT_MAX_ITERS: usize = 100;

/// K-means centroids over an embedding database plus per-record assignments.
#[derive(Debug, Clone)]
pub struct ClusterIndex {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    assignments: Vec<u32>,
    inertia: f64,
    inertia_history: Vec<f64>,
    iterations: usize,
    converged: bool,
    fingerprint: Fingerprint,
    members: Vec<Vec<u32>>,
}

impl ClusterIndex {
    /// Reassembles an index from persisted parts and recomputes its inertia
    /// against `db`, which must be the database it was built from.
    pub fn from_parts(
        k: usize,
        dim: usize,
        centroids: Vec<f32>,
        assignments: Vec<u32>,
        fingerprint: Fingerprint,
        db: &EmbeddingDatabase,
    ) -> Result<Self, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::MalformedIndex("k is zero".into()));
        }
        if centroids.len() != k * dim {
            return Err(RetrievalError::MalformedIndex(format!(
                "{} centroid values for k={k}, dim={dim}",
                centroids.len()
            )));
        }
        if let Some(bad) = assignments.iter().find(|&&a| a as usize >= k) {
            return Err(RetrievalError::MalformedIndex(format!(
                "assignment {bad} out of range for k={k}"
            )));
        }
        if fingerprint != db.fingerprint() {
            return Err(RetrievalError::StaleIndex {
                index: fingerprint,
                db: db.fingerprint(),
            });
        }
        if dim != db.dim() {
            return Err(RetrievalError::DimensionMismatch {
                expected: db.dim(),
                found: dim,
            });
        }
        if assignments.len() != db.len() {
            return Err(RetrievalError::MalformedIndex(format!(
                "{} assignments for {} records",
                assignments.len(),
                db.len()
            )));
        }
        let points = normalized_points(db)?;
        let inertia = total_cost(&points, dim, &widen(&centroids), &assignments);
        Ok(Self::assemble(
            k,
            dim,
            centroids,
            assignments,
            inertia,
            Vec::new(),
            0,
            true,
            fingerprint,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        k: usize,
        dim: usize,
        centroids: Vec<f32>,
        assignments: Vec<u32>,
        inertia: f64,
        inertia_history: Vec<f64>,
        iterations: usize,
        converged: bool,
        fingerprint: Fingerprint,
    ) -> Self {
        let mut members = vec![Vec::new(); k];
        for (i, &a) in assignments.iter().enumerate() {
            members[a as usize].push(i as u32);
        }
        Self {
            k,
            dim,
            centroids,
            assignments,
            inertia,
            inertia_history,
            iterations,
            converged,
            fingerprint,
            members,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `k x dim` centroid matrix.
    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn assignments(&self) -> &[u32] {
        &self.assignments
    }

    /// Sum of squared distances from each normalized embedding to its
    /// assigned centroid.
    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    /// Inertia recorded after the assignment step of every Lloyd iteration.
    /// Empty for indices loaded from disk.
    pub fn inertia_history(&self) -> &[f64] {
        &self.inertia_history
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    /// Record positions assigned to cluster `c`, ascending.
    pub fn members(&self, c: usize) -> &[u32] {
        &self.members[c]
    }

    /// Nearest centroid to a unit query by squared Euclidean distance.
    /// Ties go to the lowest cluster index.
    pub fn nearest_centroid(&self, unit_query: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..self.k {
            let d = sq_dist_f32(unit_query, self.centroid(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq_dist_f32(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, &y)| {
            let d = x - f64::from(y);
            d * d
        })
        .sum()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Row-major matrix of unit-normalized embeddings.
pub(crate) fn normalized_points(db: &EmbeddingDatabase) -> Result<Vec<f64>, RetrievalError> {
    let mut out = Vec::with_capacity(db.len() * db.dim());
    for r in db.records() {
        let norm = r.embedding.norm();
        if norm == 0.0 {
            return Err(RetrievalError::ZeroNorm(r.id.clone()));
        }
        out.extend(r.embedding.values().iter().map(|&v| f64::from(v) / norm));
    }
    Ok(out)
}

fn total_cost(points: &[f64], dim: usize, centroids: &[f64], assignments: &[u32]) -> f64 {
    points
        .chunks_exact(dim)
        .zip(assignments)
        .map(|(p, &a)| {
            let a = a as usize;
            sq_dist(p, &centroids[a * dim..(a + 1) * dim])
        })
        .sum()
}

/// Assigns every point to its nearest centroid (ties to the lowest index).
/// Returns whether any assignment changed.
fn assign(
    points: &[f64],
    dim: usize,
    centroids: &[f64],
    assignments: &mut [u32],
    dists: &mut [f64],
) -> bool {
    let mut changed = false;
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
            let d = sq_dist(p, centroid);
            if d < best_d {
                best_d = d;
                best = c as u32;
            }
        }
        if assignments[i] != best {
            assignments[i] = best;
            changed = true;
        }
        dists[i] = best_d;
    }
    changed
}

/// Replaces each centroid with the normalized mean of its members. A cluster
/// with no members (or a zero mean) is reseeded at the point farthest from
/// its own centroid, lowest index first, never reusing a point.
fn update(
    points: &[f64],
    dim: usize,
    k: usize,
    centroids: &mut [f64],
    assignments: &[u32],
    dists: &[f64],
) {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.chunks_exact(dim).zip(assignments) {
        let a = a as usize;
        counts[a] += 1;
        for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += x;
        }
    }
    let mut taken = vec![false; dists.len()];
    for c in 0..k {
        let sum = &sums[c * dim..(c + 1) * dim];
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        let target = &mut centroids[c * dim..(c + 1) * dim];
        if counts[c] > 0 && norm > 0.0 {
            let candidate: Vec<f64> = sum.iter().map(|s| s / norm).collect();
            // renormalising can drift by an ulp; keep the old centre unless the new one is no worse
            let cost = |centre: &[f64]| -> f64 {
                points
                    .chunks_exact(dim)
                    .zip(assignments)
                    .filter(|(_, &a)| a as usize == c)
                    .map(|(p, _)| sq_dist(p, centre))
                    .sum()
            };
            if cost(&candidate) <= cost(target) {
                target.copy_from_slice(&candidate);
            }
            continue;
        }
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, &d) in dists.iter().enumerate() {
            if !taken[i] && d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        if let Some(i) = far {
            taken[i] = true;
            target.copy_from_slice(&points[i * dim..(i + 1) * dim]);
        }
    }
}

/// k-means++ seeding: first centre uniform, later centres drawn with
/// probability proportional to squared distance from the nearest chosen
/// centre. When every remaining weight is zero the lowest unused point is taken.
fn seed_centroids(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut chosen = Vec::with_capacity(k);
    let mut used = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    used[first] = true;

    let mut dmin: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &points[first * dim..(first + 1) * dim]))
        .collect();
    while chosen.len() < k {
        let total: f64 = dmin.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in dmin.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            used.iter()
                .position(|u| !u)
                .expect("k <= n leaves an unused point")
        };
        chosen.push(next);
        used[next] = true;
        let c = &points[next * dim..(next + 1) * dim];
        for (d, p) in dmin.iter_mut().zip(points.chunks_exact(dim)) {
            *d = d.min(sq_dist(p, c));
        }
    }
    let mut out = Vec::with_capacity(k * dim);
    for i in chosen {
        out.extend_from_slice(&points[i * dim..(i + 1) * dim]);
    }
    out
}

/// Lloyd's algorithm with k-means++ seeding on unit-normalized embeddings.
///
/// Stops when an assignment pass changes nothing or after `max_iters`
/// passes. Working centroids are f64; the stored centroids are rounded to
/// f32 and the records are re-assigned against the rounded values, so every
/// stored assignment is the nearest stored centroid.
pub fn kmeans_fit(
    db: &EmbeddingDatabase,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ClusterIndex, RetrievalError> {
    let n = db.len();
    if n == 0 {
        return Err(RetrievalError::NoCandidates);
    }
    if k == 0 || k > n {
        return Err(RetrievalError::InvalidK { k, records: n });
    }
    let dim = db.dim();
    let points = normalized_points(db)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(&points, dim, k, &mut rng);

    let mut assignments = vec![u32::MAX; n];
    let mut dists = vec![0.0f64; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let changed = assign(&points, dim, &centroids, &mut assignments, &mut dists);
        history.push(dists.iter().sum());
        if !changed {
            converged = true;
            break;
        }
        update(&points, dim, k, &mut centroids, &assignments, &dists);
    }

    let stored: Vec<f32> = centroids.iter().map(|&v| v as f32).collect();
    let rounded = widen(&stored);
    assign(&points, dim, &rounded, &mut assignments, &mut dists);
    let inertia = total_cost(&points, dim, &rounded, &assignments);
    log::debug!(
        "kmeans k={k} n={n}: {iterations} iterations, converged={converged}, inertia={inertia:.6}"
    );
    Ok(ClusterIndex::assemble(
        k,
        dim,
        stored,
        assignments,
        inertia,
        history,
        iterations,
        converged,
        db.fingerprint(),
    ))
}
