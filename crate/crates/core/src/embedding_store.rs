//! Emotion-embedding database: typed utterance records, the intensity
//! taxonomy, validation, and the EMDB binary format.
//!
//! EMDB layout (all integers little-endian):
//!
//! ```text
//! "EMDB" | version u32 | dim u32 | record count u32
//! per record:
//!   id             u16 length + UTF-8
//!   emotion_label  u16 length + UTF-8
//!   intensity      u8 (0 = weak, 1 = normal, 2 = strong)
//!   transcript     u16 length + UTF-8
//!   audio_ref      u8 flag (0/1) [+ u16 length + UTF-8]
//!   embedding      dim x f32
//! ```
//!
//! A database is immutable once built. Filtering produces a new database.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::io::{atomic_write, ByteReader, ShortRead};

pub const EMDB_MAGIC: [u8; 4] = *b"EMDB";
pub const EMDB_VERSION: u32 = 1;
pub const EMDB_HEADER_LEN: usize = 16;

/// Default embedding dimension for synthetic data.
pub const DEFAULT_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed EMDB header: {0}")]
    MalformedHeader(String),
    #[error("file truncated at byte {offset}: wanted {wanted} bytes, {available} available")]
    Truncated {
        offset: usize,
        wanted: usize,
        available: usize,
    },
    #[error("dimension mismatch for record {record:?}: expected {expected}, found {found}")]
    DimensionMismatch {
        record: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("non-finite value at position {position} of record {record:?}")]
    NonFinite { record: String, position: usize },
    #[error("invalid intensity code {0}")]
    InvalidIntensityCode(u8),
    #[error("invalid audio_ref flag {0}")]
    InvalidAudioFlag(u8),
    #[error("invalid UTF-8 in field {0}")]
    InvalidUtf8(&'static str),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("record id must be non-empty")]
    EmptyId,
    #[error("emotion label of record {0:?} must be non-empty")]
    EmptyLabel(String),
    #[error("embedding must have at least one dimension")]
    EmptyEmbedding,
    #[error("database dimension must be positive")]
    ZeroDim,
    #[error("string field {field} is {len} bytes, limit is 65535")]
    StringTooLong { field: &'static str, len: usize },
    #[error("cannot normalize a zero-norm embedding")]
    ZeroNorm,
    #[error("manifest: {0}")]
    Manifest(String),
}

impl From<ShortRead> for StoreError {
    fn from(s: ShortRead) -> Self {
        if s.offset < EMDB_HEADER_LEN {
            StoreError::MalformedHeader(format!(
                "need {EMDB_HEADER_LEN} header bytes, file has {}",
                s.offset + s.available
            ))
        } else {
            StoreError::Truncated {
                offset: s.offset,
                wanted: s.wanted,
                available: s.available,
            }
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityLevel {
    Weak,
    Normal,
    Strong,
}

impl IntensityLevel {
    pub const ALL: [IntensityLevel; 3] = [Self::Weak, Self::Normal, Self::Strong];

    pub fn code(self) -> u8 {
        match self {
            Self::Weak => 0,
            Self::Normal => 1,
            Self::Strong => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Weak),
            1 => Some(Self::Normal),
            2 => Some(Self::Strong),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Weak => "weak",
            Self::Normal => "normal",
            Self::Strong => "strong",
        }
    }
}

impl fmt::Display for IntensityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown intensity level {0:?} (expected weak, normal or strong)")]
pub struct ParseIntensityError(pub String);

impl FromStr for IntensityLevel {
    type Err = ParseIntensityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weak" => Ok(Self::Weak),
            "normal" => Ok(Self::Normal),
            "strong" => Ok(Self::Strong),
            other => Err(ParseIntensityError(other.to_string())),
        }
    }
}

/// A finite, non-empty f32 vector produced by an emotion encoder.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmotionEmbedding {
    values: Vec<f32>,
}

impl EmotionEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(StoreError::EmptyEmbedding);
        }
        if let Some(position) = values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                record: String::new(),
                position,
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Euclidean norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }
}

impl<'de> Deserialize<'de> for EmotionEmbedding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let values = Vec::<f32>::deserialize(d)?;
        EmotionEmbedding::new(values).map_err(serde::de::Error::custom)
    }
}

/// Scales `e` to unit Euclidean norm.
pub fn normalize_embedding(e: &EmotionEmbedding) -> Result<EmotionEmbedding> {
    let norm = e.norm();
    if norm == 0.0 {
        return Err(StoreError::ZeroNorm);
    }
    let values = e
        .values
        .iter()
        .map(|&v| (f64::from(v) / norm) as f32)
        .collect();
    Ok(EmotionEmbedding { values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub emotion_label: String,
    pub intensity: IntensityLevel,
    pub embedding: EmotionEmbedding,
    #[serde(default)]
    pub transcript: String,
    #[serde(default)]
    pub audio_ref: Option<String>,
}

/// SHA-256 of a database's EMDB encoding. Indices carry the fingerprint of
/// the database they were built from.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

#[derive(Debug)]
pub struct EmbeddingDatabase {
    dim: usize,
    records: Vec<UtteranceRecord>,
    fingerprint: OnceLock<Fingerprint>,
}

impl Clone for EmbeddingDatabase {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            records: self.records.clone(),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

impl PartialEq for EmbeddingDatabase {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.records == other.records
    }
}

impl EmbeddingDatabase {
    /// Builds a database, enforcing dimension agreement, finiteness,
    /// non-empty ids and labels, and id uniqueness.
    pub fn new(dim: usize, records: Vec<UtteranceRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.id.is_empty() {
                return Err(StoreError::EmptyId);
            }
            if r.emotion_label.is_empty() {
                return Err(StoreError::EmptyLabel(r.id.clone()));
            }
            if r.embedding.dim() != dim {
                return Err(StoreError::DimensionMismatch {
                    record: r.id.clone(),
                    expected: dim,
                    found: r.embedding.dim(),
                });
            }
            if let Some(position) = r.embedding.values().iter().position(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite {
                    record: r.id.clone(),
                    position,
                });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(StoreError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            dim,
            records,
            fingerprint: OnceLock::new(),
        })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    pub fn get(&self, id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Distinct emotion labels in first-seen order.
    pub fn labels(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .map(|r| r.emotion_label.as_str())
            .filter(|l| seen.insert(*l))
            .collect()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        *self.fingerprint.get_or_init(|| {
            let bytes = self.to_bytes().expect("validated database always encodes");
            Fingerprint(Sha256::digest(&bytes).into())
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let per_record = 16 + 4 * self.dim;
        let mut out = Vec::with_capacity(EMDB_HEADER_LEN + per_record * self.records.len());
        out.extend_from_slice(&EMDB_MAGIC);
        out.extend_from_slice(&EMDB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, "id", &r.id)?;
            put_str(&mut out, "emotion_label", &r.emotion_label)?;
            out.push(r.intensity.code());
            put_str(&mut out, "transcript", &r.transcript)?;
            match &r.audio_ref {
                None => out.push(0),
                Some(path) => {
                    out.push(1);
                    put_str(&mut out, "audio_ref", path)?;
                }
            }
            for v in r.embedding.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        let magic = rd.take(4)?;
        if magic != EMDB_MAGIC {
            return Err(StoreError::MalformedHeader(format!(
                "bad magic {magic:02x?}"
            )));
        }
        let version = rd.u32()?;
        if version != EMDB_VERSION {
            return Err(StoreError::MalformedHeader(format!(
                "unsupported version {version}"
            )));
        }
        let dim = rd.u32()? as usize;
        if dim == 0 {
            return Err(StoreError::MalformedHeader("dim is zero".into()));
        }
        let count = rd.u32()? as usize;

        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = get_str(&mut rd, "id")?;
            let emotion_label = get_str(&mut rd, "emotion_label")?;
            let code = rd.u8()?;
            let intensity =
                IntensityLevel::from_code(code).ok_or(StoreError::InvalidIntensityCode(code))?;
            let transcript = get_str(&mut rd, "transcript")?;
            let audio_ref = match rd.u8()? {
                0 => None,
                1 => Some(get_str(&mut rd, "audio_ref")?),
                flag => return Err(StoreError::InvalidAudioFlag(flag)),
            };
            let want = 4 * dim;
            if rd.remaining() < want {
                // A short final vector with whole floats is a dimension error,
                // anything else is plain truncation.
                let left = rd.remaining();
                if records.len() + 1 == count && left % 4 == 0 {
                    return Err(StoreError::DimensionMismatch {
                        record: id,
                        expected: dim,
                        found: left / 4,
                    });
                }
            }
            let raw = rd.take(want)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(position) = values.iter().position(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite {
                    record: id,
                    position,
                });
            }
            records.push(UtteranceRecord {
                id,
                emotion_label,
                intensity,
                embedding: EmotionEmbedding { values },
                transcript,
                audio_ref,
            });
        }
        if rd.remaining() != 0 {
            return Err(StoreError::TrailingBytes(rd.remaining()));
        }
        Self::new(dim, records)
    }
}

fn put_str(out: &mut Vec<u8>, field: &'static str, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| StoreError::StringTooLong {
        field,
        len: s.len(),
    })?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn get_str(rd: &mut ByteReader<'_>, field: &'static str) -> Result<String> {
    let len = rd.u16()? as usize;
    let raw = rd.take(len)?;
    String::from_utf8(raw.to_vec()).map_err(|_| StoreError::InvalidUtf8(field))
}

pub fn load_db(path: &Path) -> Result<EmbeddingDatabase> {
    let bytes = std::fs::read(path)?;
    EmbeddingDatabase::from_bytes(&bytes)
}

pub fn save_db(db: &EmbeddingDatabase, path: &Path) -> Result<()> {
    let bytes = db.to_bytes()?;
    atomic_write(path, &bytes)?;
    Ok(())
}

/// Records whose intensity equals `level`, in original order.
pub fn filter_by_intensity(db: &EmbeddingDatabase, level: IntensityLevel) -> EmbeddingDatabase {
    let records = db
        .records
        .iter()
        .filter(|r| r.intensity == level)
        .cloned()
        .collect();
    EmbeddingDatabase {
        dim: db.dim,
        records,
        fingerprint: OnceLock::new(),
    }
}

/// One entry of a JSON authoring manifest. `tokens` optionally names the
/// token-feature file used by the synthesis pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(flatten)]
    pub record: UtteranceRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    Records(Vec<ManifestRecord>),
    WithDim {
        dim: usize,
        records: Vec<ManifestRecord>,
    },
}

/// Parses a JSON manifest: either a bare array of records (dimension taken
/// from the first record) or `{"dim": n, "records": [...]}`.
pub fn parse_manifest(json: &str) -> Result<(EmbeddingDatabase, Vec<(String, String)>)> {
    let parsed: ManifestFile =
        serde_json::from_str(json).map_err(|e| StoreError::Manifest(e.to_string()))?;
    let (dim, entries) = match parsed {
        ManifestFile::WithDim { dim, records } => (dim, records),
        ManifestFile::Records(records) => {
            let dim = records
                .first()
                .map(|r| r.record.embedding.dim())
                .ok_or_else(|| {
                    StoreError::Manifest("empty array manifest needs an explicit dim".into())
                })?;
            (dim, records)
        }
    };
    let mut tokens = Vec::new();
    let mut records = Vec::with_capacity(entries.len());
    for e in entries {
        if let Some(t) = e.tokens {
            tokens.push((e.record.id.clone(), t));
        }
        records.push(e.record);
    }
    Ok((EmbeddingDatabase::new(dim, records)?, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f32]) -> EmotionEmbedding {
        EmotionEmbedding::new(v.to_vec()).unwrap()
    }

    fn rec(id: &str, label: &str, level: IntensityLevel, v: &[f32]) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            emotion_label: label.into(),
            intensity: level,
            embedding: emb(v),
            transcript: format!("text of {id}"),
            audio_ref: None,
        }
    }

    #[test]
    fn intensity_parsing_is_closed() {
        for level in IntensityLevel::ALL {
            assert_eq!(level.as_str().parse::<IntensityLevel>().unwrap(), level);
            assert_eq!(IntensityLevel::from_code(level.code()), Some(level));
        }
        assert!("medium".parse::<IntensityLevel>().is_err());
        assert!("Strong".parse::<IntensityLevel>().is_err());
        assert_eq!(IntensityLevel::from_code(3), None);
    }

    #[test]
    fn empty_db_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.emdb");
        let db = EmbeddingDatabase::empty(64).unwrap();
        save_db(&db, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..4], b"EMDB");
        let back = load_db(&path).unwrap();
        assert_eq!(back.dim(), 64);
        assert!(back.is_empty());
    }

    #[test]
    fn two_records_round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.emdb");
        let a: Vec<f32> = (0..64).map(|i| i as f32 * 0.5 - 3.0).collect();
        let b: Vec<f32> = (0..64).map(|i| (i as f32).sin()).collect();
        let mut r2 = rec("b", "sad", IntensityLevel::Weak, &b);
        r2.audio_ref = Some("audio/b.wav".into());
        let db = EmbeddingDatabase::new(
            64,
            vec![rec("a", "happy", IntensityLevel::Strong, &a), r2],
        )
        .unwrap();
        save_db(&db, &path).unwrap();
        let back = load_db(&path).unwrap();
        assert_eq!(back, db);
        assert_eq!(back.records()[0].id, "a");
        assert_eq!(back.records()[1].audio_ref.as_deref(), Some("audio/b.wav"));
        assert_eq!(back.fingerprint(), db.fingerprint());
    }

    #[test]
    fn short_vector_is_dimension_mismatch() {
        let v: Vec<f32> = vec![0.25; 64];
        let db = EmbeddingDatabase::new(64, vec![rec("a", "x", IntensityLevel::Normal, &v)])
            .unwrap();
        let mut bytes = db.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 4);
        match EmbeddingDatabase::from_bytes(&bytes) {
            Err(StoreError::DimensionMismatch {
                expected, found, ..
            }) => {
                assert_eq!((expected, found), (64, 63));
            }
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn load_errors_are_named() {
        let v = [1.0f32, 2.0];
        let db = EmbeddingDatabase::new(2, vec![rec("a", "x", IntensityLevel::Normal, &v)])
            .unwrap();
        let good = db.to_bytes().unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            EmbeddingDatabase::from_bytes(&bad_magic),
            Err(StoreError::MalformedHeader(_))
        ));
        assert!(matches!(
            EmbeddingDatabase::from_bytes(&good[..10]),
            Err(StoreError::MalformedHeader(_))
        ));

        let mut nan = good.clone();
        let at = nan.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            EmbeddingDatabase::from_bytes(&nan),
            Err(StoreError::NonFinite { position: 1, .. })
        ));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(
            EmbeddingDatabase::from_bytes(&trailing),
            Err(StoreError::TrailingBytes(1))
        ));

        // duplicate id: two copies of the same record
        let dup = EmbeddingDatabase {
            dim: 2,
            records: vec![db.records[0].clone(), db.records[0].clone()],
            fingerprint: OnceLock::new(),
        };
        assert!(matches!(
            EmbeddingDatabase::from_bytes(&dup.to_bytes().unwrap()),
            Err(StoreError::DuplicateId(id)) if id == "a"
        ));

        let mut bad_level = good.clone();
        // header(16) + id(2+1) + label(2+1)
        bad_level[22] = 7;
        assert!(matches!(
            EmbeddingDatabase::from_bytes(&bad_level),
            Err(StoreError::InvalidIntensityCode(7))
        ));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let db = EmbeddingDatabase::empty(4).unwrap();
        let err = save_db(&db, Path::new("/nonexistent-dir/x/y.emdb")).unwrap_err();
        assert!(matches!(err, StoreError::Io(_)));
    }

    #[test]
    fn construction_rejects_bad_records() {
        let a = rec("a", "x", IntensityLevel::Weak, &[1.0, 0.0]);
        assert!(matches!(
            EmbeddingDatabase::new(3, vec![a.clone()]),
            Err(StoreError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            EmbeddingDatabase::new(2, vec![a.clone(), a.clone()]),
            Err(StoreError::DuplicateId(_))
        ));
        assert!(matches!(
            EmotionEmbedding::new(vec![1.0, f32::INFINITY]),
            Err(StoreError::NonFinite { position: 1, .. })
        ));
        assert!(matches!(EmbeddingDatabase::new(0, vec![]), Err(StoreError::ZeroDim)));
    }

    #[test]
    fn filter_counts_match_brute_force() {
        let levels = [
            IntensityLevel::Strong,
            IntensityLevel::Weak,
            IntensityLevel::Strong,
            IntensityLevel::Weak,
            IntensityLevel::Strong,
        ];
        let records = levels
            .iter()
            .enumerate()
            .map(|(i, &l)| rec(&format!("r{i}"), "x", l, &[i as f32 + 1.0]))
            .collect();
        let db = EmbeddingDatabase::new(1, records).unwrap();
        let strong = filter_by_intensity(&db, IntensityLevel::Strong);
        let expected: Vec<&str> = db
            .records()
            .iter()
            .filter(|r| r.intensity == IntensityLevel::Strong)
            .map(|r| r.id.as_str())
            .collect();
        assert_eq!(strong.len(), 3);
        let got: Vec<&str> = strong.records().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(got, expected);
        assert!(filter_by_intensity(&db, IntensityLevel::Normal).is_empty());
        assert_eq!(filter_by_intensity(&db, IntensityLevel::Normal).dim(), 1);
    }

    #[test]
    fn filter_identity_when_all_match() {
        let records = (0..4)
            .map(|i| rec(&format!("r{i}"), "x", IntensityLevel::Normal, &[1.0, i as f32]))
            .collect();
        let db = EmbeddingDatabase::new(2, records).unwrap();
        assert_eq!(filter_by_intensity(&db, IntensityLevel::Normal), db);
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_embedding(&emb(&[3.0, 4.0])).unwrap();
        assert!((n.values()[0] - 0.6).abs() < 1e-6);
        assert!((n.values()[1] - 0.8).abs() < 1e-6);
        let unit = emb(&[0.0, 1.0, 0.0]);
        assert_eq!(normalize_embedding(&unit).unwrap(), unit);
        assert!(matches!(
            normalize_embedding(&emb(&[0.0, 0.0])),
            Err(StoreError::ZeroNorm)
        ));
    }

    #[test]
    fn manifest_import() {
        let json = r#"[
            {"id": "a", "emotion_label": "happy", "intensity": "strong",
             "embedding": [1.0, 2.5], "transcript": "hi", "tokens": "tok/a.frames"},
            {"id": "b", "emotion_label": "sad", "intensity": "weak", "embedding": [-1e-3, 4]}
        ]"#;
        let (db, tokens) = parse_manifest(json).unwrap();
        assert_eq!(db.dim(), 2);
        assert_eq!(db.records()[1].transcript, "");
        assert_eq!(tokens, vec![("a".to_string(), "tok/a.frames".to_string())]);
        assert!(parse_manifest("[]").is_err());
        let (empty, _) = parse_manifest(r#"{"dim": 8, "records": []}"#).unwrap();
        assert_eq!(empty.dim(), 8);
        assert!(parse_manifest(
            r#"[{"id": "a", "emotion_label": "x", "intensity": "mild", "embedding": [1]}]"#
        )
        .is_err());
    }

    fn arb_db() -> impl Strategy<Value = EmbeddingDatabase> {
        (1usize..12, 0usize..20).prop_flat_map(|(dim, n)| {
            proptest::collection::vec(
                (
                    proptest::collection::vec(-1e6f32..1e6, dim),
                    0u8..3,
                    "[a-z]{1,6}",
                    ".{0,12}",
                    proptest::option::of("[a-z/]{1,10}"),
                ),
                n,
            )
            .prop_map(move |rows| {
                let records = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (v, lvl, label, transcript, audio_ref))| UtteranceRecord {
                        id: format!("id{i}"),
                        emotion_label: label,
                        intensity: IntensityLevel::from_code(lvl).unwrap(),
                        embedding: EmotionEmbedding::new(v).unwrap(),
                        transcript,
                        audio_ref,
                    })
                    .collect();
                EmbeddingDatabase::new(dim, records).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(db in arb_db()) {
            let back = EmbeddingDatabase::from_bytes(&db.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.dim(), db.dim());
            for (a, b) in back.records().iter().zip(db.records()) {
                let abits: Vec<u32> = a.embedding.values().iter().map(|v| v.to_bits()).collect();
                let bbits: Vec<u32> = b.embedding.values().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
                prop_assert_eq!(&a.id, &b.id);
                prop_assert_eq!(&a.transcript, &b.transcript);
                prop_assert_eq!(&a.audio_ref, &b.audio_ref);
            }
            prop_assert_eq!(back, db);
        }

        #[test]
        fn intensity_filters_partition(db in arb_db()) {
            let mut ids: Vec<String> = Vec::new();
            for level in IntensityLevel::ALL {
                let sub = filter_by_intensity(&db, level);
                prop_assert!(sub.records().iter().all(|r| r.intensity == level));
                ids.extend(sub.records().iter().map(|r| r.id.clone()));
            }
            let before = ids.len();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(before, ids.len());
            let mut all: Vec<String> = db.records().iter().map(|r| r.id.clone()).collect();
            all.sort();
            prop_assert_eq!(ids, all);
        }

        #[test]
        fn normalize_is_idempotent(v in proptest::collection::vec(-1e3f32..1e3, 1..64)) {
            let e = EmotionEmbedding::new(v).unwrap();
            prop_assume!(e.norm() > 1e-3);
            let once = normalize_embedding(&e).unwrap();
            let twice = normalize_embedding(&once).unwrap();
            prop_assert!((once.norm() - 1.0).abs() < 1e-6);
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
