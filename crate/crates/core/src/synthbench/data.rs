//! Gaussian-mixture stand-in for an emotion encoder's output: one cluster
//! per emotion, records scattered around the cluster centre and normalized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::embedding_store::{
    EmbeddingDatabase, EmotionEmbedding, IntensityLevel, UtteranceRecord,
};

// RNG streams derived from the single top-level seed.
const STREAM_CENTERS: u64 = 0;
const STREAM_RECORDS: u64 = 1;
const STREAM_QUERIES: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetConfig {
    pub num_emotions: usize,
    pub dim: usize,
    pub records_per_emotion: usize,
    /// Per-coordinate standard deviation of the within-cluster noise.
    pub cluster_sigma: f64,
    /// Centres are uniform in `[-center_spread, center_spread]^dim`.
    pub center_spread: f64,
    /// Fractions of weak, normal and strong records.
    pub intensity_mix: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            num_emotions: 8,
            dim: 64,
            records_per_emotion: 1000,
            cluster_sigma: 0.05,
            center_spread: 1.0,
            intensity_mix: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            seed: 0,
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.num_emotions == 0 {
            return bad("num_emotions must be positive");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.records_per_emotion == 0 {
            return bad("records_per_emotion must be positive");
        }
        if !(self.cluster_sigma >= 0.0 && self.cluster_sigma.is_finite()) {
            return bad("cluster_sigma must be finite and non-negative");
        }
        if !(self.center_spread > 0.0 && self.center_spread.is_finite()) {
            return bad("center_spread must be positive");
        }
        if self.intensity_mix.iter().any(|f| !(*f >= 0.0)) {
            return bad("intensity fractions must be non-negative");
        }
        let sum: f64 = self.intensity_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(BenchError::Config(format!(
                "intensity fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn total_records(&self) -> usize {
        self.num_emotions * self.records_per_emotion
    }
}

pub fn emotion_label(cluster: usize) -> String {
    format!("emotion_{cluster}")
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Cluster centres for a configuration. Centres depend only on
/// `(num_emotions, dim, center_spread, seed)`, so databases of different
/// sizes and held-out queries share them.
#[derive(Debug, Clone)]
pub struct SyntheticMixture {
    config: SyntheticDatasetConfig,
    centers: Vec<Vec<f64>>,
}

impl SyntheticMixture {
    pub fn new(config: SyntheticDatasetConfig) -> Result<Self, BenchError> {
        config.validate()?;
        let mut rng = rng_for(config.seed, STREAM_CENTERS);
        let s = config.center_spread;
        let centers = (0..config.num_emotions)
            .map(|_| (0..config.dim).map(|_| rng.random_range(-s..=s)).collect())
            .collect();
        Ok(Self { config, centers })
    }

    pub fn config(&self) -> &SyntheticDatasetConfig {
        &self.config
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Smallest Euclidean distance between two centres.
    pub fn min_center_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.centers.iter().enumerate() {
            for b in &self.centers[i + 1..] {
                let d = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }

    /// Closest centre pair distance in units of `cluster_sigma`.
    pub fn separation_in_sigmas(&self) -> f64 {
        self.min_center_distance() / self.config.cluster_sigma
    }

    fn sample_point(&self, cluster: usize, rng: &mut ChaCha8Rng) -> EmotionEmbedding {
        let sigma = self.config.cluster_sigma;
        let v: Vec<f64> = self.centers[cluster]
            .iter()
            .map(|&c| {
                let z: f64 = StandardNormal.sample(rng);
                c + sigma * z
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { 1.0 / norm } else { 1.0 };
        EmotionEmbedding::new(v.iter().map(|x| (x * scale) as f32).collect())
            .expect("finite sample")
    }

    fn intensity(&self, u: f64) -> IntensityLevel {
        let mut acc = 0.0;
        for (level, &f) in IntensityLevel::ALL.iter().zip(&self.config.intensity_mix) {
            acc += f;
            if f > 0.0 && u < acc {
                return *level;
            }
        }
        // rounding left u above the cumulative sum: last non-empty level
        IntensityLevel::ALL
            .into_iter()
            .zip(self.config.intensity_mix)
            .rev()
            .find(|(_, f)| *f > 0.0)
            .map(|(l, _)| l)
            .unwrap_or(IntensityLevel::Normal)
    }

    /// Cluster-major database: `records_per_emotion` records for emotion 0,
    /// then emotion 1, and so on.
    pub fn sample_db(&self) -> EmbeddingDatabase {
        let mut rng = rng_for(self.config.seed, STREAM_RECORDS);
        let mut records = Vec::with_capacity(self.config.total_records());
        for cluster in 0..self.config.num_emotions {
            let label = emotion_label(cluster);
            for _ in 0..self.config.records_per_emotion {
                let i = records.len();
                let embedding = self.sample_point(cluster, &mut rng);
                let intensity = self.intensity(rng.random::<f64>());
                records.push(UtteranceRecord {
                    id: format!("utt_{i:06}"),
                    transcript: format!("{label} {intensity} utterance {i}"),
                    emotion_label: label.clone(),
                    intensity,
                    embedding,
                    audio_ref: None,
                });
            }
        }
        EmbeddingDatabase::new(self.config.dim, records).expect("generated records are valid")
    }

    /// Fresh samples from the mixture (never part of any database), each
    /// with the label of the cluster that generated it.
    pub fn sample_queries(&self, n: usize, seed: u64) -> Vec<(EmotionEmbedding, String)> {
        let mut rng = rng_for(self.config.seed ^ seed.rotate_left(17), STREAM_QUERIES);
        (0..n)
            .map(|_| {
                let cluster = rng.random_range(0..self.config.num_emotions);
                (self.sample_point(cluster, &mut rng), emotion_label(cluster))
            })
            .collect()
    }

    /// Each centre, unit-normalized, with its label.
    pub fn center_queries(&self) -> Vec<(EmotionEmbedding, String)> {
        self.centers
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let e = EmotionEmbedding::new(v.iter().map(|x| (x / norm) as f32).collect())
                    .expect("finite centre");
                (e, emotion_label(c))
            })
            .collect()
    }
}

pub fn generate_synthetic_db(
    config: &SyntheticDatasetConfig,
) -> Result<EmbeddingDatabase, BenchError> {
    Ok(SyntheticMixture::new(config.clone())?.sample_db())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_sizes() {
        let small = SyntheticDatasetConfig {
            num_emotions: 4,
            records_per_emotion: 750,
            ..Default::default()
        };
        assert_eq!(generate_synthetic_db(&small).unwrap().len(), 3000);
        let large = SyntheticDatasetConfig {
            num_emotions: 8,
            records_per_emotion: 1000,
            ..Default::default()
        };
        assert_eq!(generate_synthetic_db(&large).unwrap().len(), 8000);
    }

    #[test]
    fn zero_sigma_collapses_clusters() {
        let cfg = SyntheticDatasetConfig {
            num_emotions: 3,
            dim: 5,
            records_per_emotion: 20,
            cluster_sigma: 0.0,
            ..Default::default()
        };
        let db = generate_synthetic_db(&cfg).unwrap();
        for chunk in db.records().chunks(20) {
            assert!(chunk.iter().all(|r| r.embedding == chunk[0].embedding));
            assert!(chunk.iter().all(|r| r.emotion_label == chunk[0].emotion_label));
        }
    }

    #[test]
    fn records_are_unit_norm_and_deterministic() {
        let cfg = SyntheticDatasetConfig {
            records_per_emotion: 10,
            ..Default::default()
        };
        let a = generate_synthetic_db(&cfg).unwrap();
        let b = generate_synthetic_db(&cfg).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        for r in a.records() {
            assert!((r.embedding.norm() - 1.0).abs() < 1e-6);
        }
        let other = generate_synthetic_db(&SyntheticDatasetConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn centres_shared_across_sizes() {
        let a = SyntheticMixture::new(SyntheticDatasetConfig {
            records_per_emotion: 375,
            ..Default::default()
        })
        .unwrap();
        let b = SyntheticMixture::new(SyntheticDatasetConfig::default()).unwrap();
        assert_eq!(a.centers(), b.centers());
        assert_eq!(a.sample_queries(5, 3), b.sample_queries(5, 3));
    }

    #[test]
    fn intensity_mix_is_respected() {
        let cfg = SyntheticDatasetConfig {
            num_emotions: 2,
            dim: 4,
            records_per_emotion: 2000,
            intensity_mix: [0.5, 0.0, 0.5],
            ..Default::default()
        };
        let db = generate_synthetic_db(&cfg).unwrap();
        let count = |l| db.records().iter().filter(|r| r.intensity == l).count();
        assert_eq!(count(IntensityLevel::Normal), 0);
        let weak = count(IntensityLevel::Weak) as f64 / 4000.0;
        assert!((weak - 0.5).abs() < 0.05, "weak fraction {weak}");
    }

    #[test]
    fn invalid_configs() {
        let base = SyntheticDatasetConfig::default();
        for cfg in [
            SyntheticDatasetConfig { num_emotions: 0, ..base.clone() },
            SyntheticDatasetConfig { dim: 0, ..base.clone() },
            SyntheticDatasetConfig { cluster_sigma: -1.0, ..base.clone() },
            SyntheticDatasetConfig { center_spread: 0.0, ..base.clone() },
            SyntheticDatasetConfig { intensity_mix: [0.5, 0.5, 0.5], ..base.clone() },
            SyntheticDatasetConfig { intensity_mix: [1.5, -0.5, 0.0], ..base.clone() },
        ] {
            assert!(matches!(cfg.validate(), Err(BenchError::Config(_))), "{cfg:?}");
        }
    }
}
