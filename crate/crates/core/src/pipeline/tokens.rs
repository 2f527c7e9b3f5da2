//! Token-feature sources for database records and the stand-in token
//! generator.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::PromptAssembly;
use crate::embedding_store::EmbeddingDatabase;
use crate::flow_matching::{load_frames, save_frames, FlowError, FrameSequence, TOKEN_RATE_HZ};
use crate::io::atomic_write;

#[derive(Debug, thiserror::Error)]
pub enum TokenError {
    #[error("no token features for record {0}")]
    Missing(String),
    #[error("token file {path}: {source}")]
    File { path: PathBuf, source: FlowError },
    #[error("token map {path}: {message}")]
    Map { path: PathBuf, message: String },
}

/// Per-record token features.
pub trait TokenSource {
    fn tokens_for(&self, record_id: &str) -> Result<FrameSequence, TokenError>;
}

/// JSON object mapping record ids to token files. Relative file paths are
/// resolved against the map file's directory.
#[derive(Debug, Clone)]
pub struct TokenFileMap {
    entries: BTreeMap<String, PathBuf>,
}

impl TokenFileMap {
    pub fn load(path: &Path) -> Result<Self, TokenError> {
        let map_err = |message: String| TokenError::Map {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| map_err(e.to_string()))?;
        let raw: BTreeMap<String, PathBuf> = serde_json::from_str(&text).map_err(|e| map_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let entries = raw
            .into_iter()
            .map(|(id, p)| {
                let resolved = if p.is_absolute() { p } else { base.join(p) };
                (id, resolved)
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, PathBuf)>) -> Self {
        Self {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn entries(&self) -> &BTreeMap<String, PathBuf> {
        &self.entries
    }

    /// Writes the map with paths relative to `path`'s directory when
    /// possible.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel: BTreeMap<&str, String> = self
            .entries
            .iter()
            .map(|(id, p)| {
                let shown = p.strip_prefix(base).unwrap_or(p);
                (id.as_str(), shown.to_string_lossy().into_owned())
            })
            .collect();
        let json = serde_json::to_vec_pretty(&rel).map_err(std::io::Error::other)?;
        atomic_write(path, &json)
    }
}

impl TokenSource for TokenFileMap {
    fn tokens_for(&self, record_id: &str) -> Result<FrameSequence, TokenError> {
        let path = self
            .entries
            .get(record_id)
            .ok_or_else(|| TokenError::Missing(record_id.to_string()))?;
        load_frames(path).map_err(|source| TokenError::File {
            path: path.clone(),
            source,
        })
    }
}

/// Token features held in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemoryTokens(pub HashMap<String, FrameSequence>);

impl TokenSource for InMemoryTokens {
    fn tokens_for(&self, record_id: &str) -> Result<FrameSequence, TokenError> {
        self.0
            .get(record_id)
            .cloned()
            .ok_or_else(|| TokenError::Missing(record_id.to_string()))
    }
}

/// Fixture token features for record `position` of a database: between 25
/// and 49 frames at 50 Hz of unit noise around an offset tied to the
/// record's emotion label.
pub fn synthetic_record_tokens(db: &EmbeddingDatabase, position: usize, dim: usize, seed: u64) -> FrameSequence {
    let record = &db.records()[position];
    let label_index = db
        .labels()
        .iter()
        .position(|l| *l == record.emotion_label)
        .expect("record label is listed");
    let mut label_rng = ChaCha8Rng::seed_from_u64(seed);
    label_rng.set_stream(1 + label_index as u64);
    let offset: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut label_rng)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7f4a_7c15);
    rng.set_stream(position as u64);
    let frames = 25 + position % 25;
    let data = (0..frames * dim)
        .map(|i| {
            let z: f64 = StandardNormal.sample(&mut rng);
            offset[i % dim] + 0.5 * z
        })
        .collect();
    FrameSequence::new(frames, dim, data, TOKEN_RATE_HZ).expect("finite fixture tokens")
}

/// Writes one token file per record into `dir` and returns the map.
pub fn write_fixture_tokens(db: &EmbeddingDatabase, dir: &Path, dim: usize, seed: u64) -> Result<TokenFileMap, TokenError> {
    std::fs::create_dir_all(dir).map_err(|e| TokenError::Map {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut entries = Vec::with_capacity(db.len());
    for (i, record) in db.records().iter().enumerate() {
        let path = dir.join(format!("{i:06}.tok"));
        save_frames(&synthetic_record_tokens(db, i, dim, seed), &path).map_err(|source| TokenError::File {
            path: path.clone(),
            source,
        })?;
        entries.push((record.id.clone(), path));
    }
    Ok(TokenFileMap::from_entries(entries))
}

/// Produces token features for the target text given an assembled prompt.
pub trait TokenGenerator {
    fn generate(&self, assembly: &PromptAssembly, seed: u64) -> Result<FrameSequence, FlowError>;
}

/// Stand-in for an autoregressive speech-token model. Emits the prompt
/// tokens followed by `frames_per_char` frames per character of the target
/// text: seeded unit noise shifted by the prompt's mean frame.
#[derive(Debug, Clone, Copy)]
pub struct MockTokenGenerator {
    pub frames_per_char: usize,
}

impl Default for MockTokenGenerator {
    fn default() -> Self {
        Self { frames_per_char: 4 }
    }
}

impl TokenGenerator for MockTokenGenerator {
    fn generate(&self, assembly: &PromptAssembly, seed: u64) -> Result<FrameSequence, FlowError> {
        let prompt = &assembly.prompt_tokens;
        let dim = prompt.dim();
        let mut mean = vec![0.0; dim];
        for frame in prompt.frames() {
            mean.iter_mut().zip(frame).for_each(|(m, v)| *m += v);
        }
        if !prompt.is_empty() {
            mean.iter_mut().for_each(|m| *m /= prompt.len() as f64);
        }
        let n = self.frames_per_char * assembly.target_text.chars().count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * dim)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean[i % dim] + z
            })
            .collect();
        let mut out = FrameSequence::new(prompt.len(), dim, prompt.data().to_vec(), TOKEN_RATE_HZ)?;
        out.extend(&FrameSequence::new(n, dim, data, TOKEN_RATE_HZ)?)?;
        Ok(out)
    }
}

pub fn mock_generate_tokens(assembly: &PromptAssembly, seed: u64) -> Result<FrameSequence, FlowError> {
    MockTokenGenerator::default().generate(assembly, seed)
}
