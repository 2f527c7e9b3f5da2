//! EMIX: the on-disk form of a [`ClusterIndex`].
//!
//! ```text
//! "EMIX" | version u32 | k u32 | dim u32 | centroids k*dim f32
//!        | assignment count u32 | assignments u32 each | fingerprint 32 bytes
//! ```

use std::path::Path;

use super::{ClusterIndex, RetrievalError};
use crate::embedding_store::{EmbeddingDatabase, Fingerprint};
use crate::io::{atomic_write, ByteReader, ShortRead};

pub const EMIX_MAGIC: [u8; 4] = *b"EMIX";
pub const EMIX_VERSION: u32 = 1;

impl From<ShortRead> for RetrievalError {
    fn from(s: ShortRead) -> Self {
        RetrievalError::MalformedIndex(format!(
            "truncated at byte {}: wanted {}, {} available",
            s.offset, s.wanted, s.available
        ))
    }
}

pub fn encode_index(index: &ClusterIndex) -> Vec<u8> {
    let n = index.assignments().len();
    let mut out = Vec::with_capacity(24 + 4 * index.centroids().len() + 4 * n + 32);
    out.extend_from_slice(&EMIX_MAGIC);
    out.extend_from_slice(&EMIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(index.k() as u32).to_le_bytes());
    out.extend_from_slice(&(index.dim() as u32).to_le_bytes());
    for v in index.centroids() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for a in index.assignments() {
        out.extend_from_slice(&a.to_le_bytes());
    }
    out.extend_from_slice(&index.fingerprint().0);
    out
}

/// Decodes EMIX bytes and binds the result to `db`. Fails with
/// [`RetrievalError::StaleIndex`] if the stored fingerprint is not `db`'s.
pub fn decode_index(bytes: &[u8], db: &EmbeddingDatabase) -> Result<ClusterIndex, RetrievalError> {
    let mut rd = ByteReader::new(bytes);
    if rd.take(4)? != EMIX_MAGIC {
        return Err(RetrievalError::MalformedIndex("bad magic".into()));
    }
    let version = rd.u32()?;
    if version != EMIX_VERSION {
        return Err(RetrievalError::MalformedIndex(format!(
            "unsupported version {version}"
        )));
    }
    let k = rd.u32()? as usize;
    let dim = rd.u32()? as usize;
    let raw = rd.take(k.checked_mul(dim).and_then(|v| v.checked_mul(4)).ok_or_else(|| {
        RetrievalError::MalformedIndex("centroid block size overflows".into())
    })?)?;
    let centroids: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let count = rd.u32()? as usize;
    let raw = rd.take(count * 4)?;
    let assignments: Vec<u32> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut fp = [0u8; 32];
    fp.copy_from_slice(rd.take(32)?);
    if rd.remaining() != 0 {
        return Err(RetrievalError::MalformedIndex(format!(
            "{} trailing bytes",
            rd.remaining()
        )));
    }
    ClusterIndex::from_parts(k, dim, centroids, assignments, Fingerprint(fp), db)
}

pub fn save_index(index: &ClusterIndex, path: &Path) -> Result<(), RetrievalError> {
    atomic_write(path, &encode_index(index))?;
    Ok(())
}

pub fn load_index(path: &Path, db: &EmbeddingDatabase) -> Result<ClusterIndex, RetrievalError> {
    let bytes = std::fs::read(path)?;
    decode_index(&bytes, db)
}
