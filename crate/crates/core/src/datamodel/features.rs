//! Per-utterance feature vectors and their `MAGF` binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MAGF" | version u16 | modality u8 | dimension u32 | count u64
//! count × ( id_len u16 | id utf-8 | dimension × f32 )
//! ```
//!
//! Provenance (encoder identifier and config hash) is kept in a JSON sidecar
//! next to the binary file, so the binary layout stays fixed.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::conversation::Modality;
use crate::error::{Error, FormatError, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const FEATURE_MAGIC: [u8; 4] = *b"MAGF";
pub const FEATURE_VERSION: u16 = 1;
/// magic + version + modality + dimension + count
pub const HEADER_BYTES: usize = 4 + 2 + 1 + 4 + 8;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub encoder: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub utterance_id: String,
    pub modality: Modality,
    pub vector: Vec<f32>,
}

/// Fixed-width vectors for one modality, keyed by utterance id, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    modality: Modality,
    dimension: usize,
    records: IndexMap<String, Vec<f32>>,
    pub provenance: Provenance,
}

impl FeatureStore {
    pub fn new(modality: Modality, dimension: usize, provenance: Provenance) -> Self {
        Self {
            modality,
            dimension,
            records: IndexMap::new(),
            provenance,
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, utterance_id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = utterance_id.into();
        if vector.len() != self.dimension {
            return Err(Error::shape(
                "FeatureStore::insert",
                format!(
                    "{id}: vector of {} for dimension {}",
                    vector.len(),
                    self.dimension
                ),
            ));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("{id}: non-finite feature value")));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::Input(format!("utterance id of {} bytes", id.len())));
        }
        if self.records.contains_key(&id) {
            return Err(Error::Validation(format!("duplicate utterance id {id}")));
        }
        self.records.insert(id, vector);
        Ok(())
    }

    pub fn get(&self, utterance_id: &str) -> Option<&[f32]> {
        self.records.get(utterance_id).map(Vec::as_slice)
    }

    pub fn record(&self, utterance_id: &str) -> Option<FeatureRecord> {
        self.get(utterance_id).map(|v| FeatureRecord {
            utterance_id: utterance_id.to_string(),
            modality: self.modality,
            vector: v.to_vec(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.records.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Stacks the vectors of `ids` into a matrix, failing on the first missing id.
    pub fn matrix<T: Scalar>(&self, ids: &[&str]) -> Result<Mat<T>> {
        let mut data = Vec::with_capacity(ids.len() * self.dimension);
        for id in ids {
            let v = self.get(id).ok_or_else(|| {
                Error::Dataset(format!("utterance {id} has no {} feature", self.modality))
            })?;
            data.extend(v.iter().map(|&x| T::from_f64_lossy(x as f64)));
        }
        Mat::from_vec(ids.len(), self.dimension, data)
    }

    /// Exact encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES
            + self
                .records
                .keys()
                .map(|k| 2 + k.len() + 4 * self.dimension)
                .sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.push(self.modality.tag());
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (id, v) in &self.records {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a `MAGF` buffer. With `expected_dim`, a differing header dimension is an error.
    pub fn decode(bytes: &[u8], expected_dim: Option<usize>) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4).map_err(|_| FormatError::BadMagic {
            offset: 0,
            expected: FEATURE_MAGIC,
            found: bytes.to_vec(),
        })?;
        if magic != FEATURE_MAGIC {
            return Err(FormatError::BadMagic {
                offset: 0,
                expected: FEATURE_MAGIC,
                found: magic.to_vec(),
            });
        }
        let at = r.offset();
        let version = r.u16()?;
        if version != FEATURE_VERSION {
            return Err(FormatError::UnsupportedVersion {
                offset: at,
                version,
            });
        }
        let at = r.offset();
        let tag = r.u8()?;
        let modality =
            Modality::from_tag(tag).ok_or(FormatError::UnknownTag { offset: at, tag })?;
        let at = r.offset();
        let dimension = r.u32()? as usize;
        if let Some(exp) = expected_dim {
            if exp != dimension {
                return Err(FormatError::DimensionMismatch {
                    offset: at,
                    expected: exp,
                    found: dimension,
                });
            }
        }
        if dimension == 0 {
            return Err(FormatError::DimensionMismatch {
                offset: at,
                expected: 1,
                found: 0,
            });
        }
        let count = r.u64()?;
        let mut store = FeatureStore::new(modality, dimension, Provenance::default());
        for _ in 0..count {
            let len = r.u16()? as usize;
            let at = r.offset();
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| FormatError::InvalidUtf8 { offset: at })?
                .to_string();
            if store.records.contains_key(&id) {
                return Err(FormatError::DuplicateId { offset: at, id });
            }
            let at = r.offset();
            let raw = r.take(4 * dimension)?;
            let v: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(k) = v.iter().position(|x| !x.is_finite()) {
                return Err(FormatError::NonFinite {
                    offset: at + 4 * k as u64,
                });
            }
            store.records.insert(id, v);
        }
        if r.remaining() > 0 {
            return Err(FormatError::TrailingBytes {
                offset: r.offset(),
                extra: r.remaining(),
            });
        }
        Ok(store)
    }
}

pub fn provenance_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

/// Writes the binary store and its provenance sidecar.
pub fn write_feature_store(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, store.encode()).map_err(|e| Error::io(path, e))?;
    let side = provenance_path(path);
    let json = serde_json::to_string_pretty(&store.provenance).expect("plain struct");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_feature_store(path: impl AsRef<Path>) -> Result<FeatureStore> {
    read_feature_store_checked(path, None)
}

/// Reads a store, requiring its dimension to equal `expected_dim` when given.
pub fn read_feature_store_checked(
    path: impl AsRef<Path>,
    expected_dim: Option<usize>,
) -> Result<FeatureStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut store = FeatureStore::decode(&bytes, expected_dim).map_err(|source| Error::Format {
        path: path.display().to_string(),
        source,
    })?;
    let side = provenance_path(path);
    if let Ok(text) = std::fs::read_to_string(&side) {
        store.provenance = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("{}: {e}", side.display()),
        })?;
    }
    Ok(store)
}

/// Little-endian cursor that reports the offset of every short read.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.offset(),
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
